//! `tokenize` and `detokenize`.
//!
//! A dump has `# input`, `# image` and `# target` sections; each token line
//! is `id<TAB>band<TAB>description`. `detokenize` reads the `# target`
//! section of a dump, or every id in a file without sections.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::{json, Value};
use uio_core::data_io::{read_jsonl, read_raster, write_raster};
use uio_core::dense_codec::{palette, raster_to_masks};
use uio_core::infer::{dense_from_raster, tokens_to_image, DenseOutput, DenseTask};
use uio_core::model::with_eos;
use uio_core::raster::RasterImage;
use uio_core::rng::keyed_rng;
use uio_core::sparse_codec::dequantize_bin;
use uio_core::taskgen::{build_example, LossSpace, Record, TaskContext, TaskId};
use uio_core::vocab::{sentinel_index, Band, EOS_ID, NO_COORD_ID, PAD_ID};

use crate::artifacts::Artifacts;
use crate::config::RunConfig;
use crate::CliError;

/// Records from a JSONL file, with `image_path` resolved next to the file.
pub fn read_records(path: &Path) -> Result<Vec<Record>, CliError> {
    let mut recs: Vec<Record> = read_jsonl(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    for r in &mut recs {
        if r.image.is_none() {
            if let Some(p) = &r.image_path {
                r.image = Some(read_raster(dir.join(p))?);
            }
        }
    }
    Ok(recs)
}

pub fn describe(ctx: &TaskContext, id: usize) -> String {
    let band = match ctx.layout.classify(id) {
        Ok((b, _)) => b.to_string(),
        Err(_) => return format!("{id}\tinvalid\t-"),
    };
    let what = match ctx.layout.classify(id) {
        _ if id == PAD_ID => "<pad>".to_string(),
        _ if id == EOS_ID => "<eos>".to_string(),
        _ if id == NO_COORD_ID => "<no_coord>".to_string(),
        _ if sentinel_index(id).is_some() => format!("<sentinel_{}>", sentinel_index(id).unwrap_or_default()),
        Ok((Band::Location, bin)) => {
            let v = dequantize_bin(bin, ctx.layout.num_locations()).unwrap_or(f64::NAN);
            format!("bin {bin} ({v:.4})")
        }
        Ok((Band::Vision, code)) => format!("code {code}"),
        _ => match ctx.tok.piece(id) {
            Some(bytes) => format!("{:?}", String::from_utf8_lossy(bytes)),
            None => "<unused>".to_string(),
        },
    };
    format!("{id}\t{band}\t{what}")
}

fn dump(ctx: &TaskContext, task: TaskId, index: usize, rec: &Record, seed: u64) -> Result<String, CliError> {
    let ex = build_example(ctx, task, rec, &mut keyed_rng(seed, 0, index as u64))?;
    let mut s = format!("# record {index} task {}\n# input\n", task.name());
    for &id in &ex.input_ids {
        let _ = writeln!(s, "{}", describe(ctx, id));
    }
    if let Some(img) = &ex.input_image {
        let _ = writeln!(s, "# image {}x{}, {} masked patches", img.height(), img.width(), ex.masked_patches.len());
    }
    s.push_str("# target\n");
    for id in with_eos(&ex.target_ids) {
        let _ = writeln!(s, "{}", describe(ctx, id));
    }
    Ok(s)
}

pub fn tokenize(cfg: &RunConfig) -> Result<(), CliError> {
    let task = cfg.require_task()?;
    let input = cfg.require(&cfg.input, "input")?;
    let art = Artifacts::load(cfg, false)?;
    let ctx = art.ctx();
    let mut out = String::new();
    for (i, rec) in read_records(input)?.iter().enumerate() {
        out.push_str(&dump(&ctx, task, i, rec, cfg.seed)?);
    }
    match &cfg.out {
        Some(p) => std::fs::write(p, out).map_err(uio_core::Error::from)?,
        None => print!("{out}"),
    }
    Ok(())
}

/// Target ids of a dump, or all ids of a plain id list.
pub fn parse_token_file(text: &str) -> Result<Vec<usize>, CliError> {
    let has_sections = text.lines().any(|l| l.trim() == "# target");
    let mut in_target = !has_sections;
    let mut ids = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(h) = line.strip_prefix('#') {
            if has_sections {
                in_target = h.trim() == "target";
            }
            continue;
        }
        if !in_target || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = match line.split_once('\t') {
            Some((first, _)) => vec![first],
            None => line.split(|c: char| c.is_whitespace() || c == ',').filter(|f| !f.is_empty()).collect(),
        };
        for f in fields {
            ids.push(f.trim().parse().map_err(|_| CliError::Usage(format!("line {}: {f:?} is not a token id", n + 1)))?);
        }
    }
    Ok(ids)
}

/// Structured form of a target sequence. Image-like targets are decoded
/// through the VQ tokenizer and written to `raster_path` when given.
pub fn decode_target(ctx: &TaskContext, task: TaskId, ids: &[usize], max_depth: f64, raster_path: Option<&Path>) -> Result<Value, CliError> {
    let ids = match ids.iter().position(|&i| i == EOS_ID) {
        Some(p) => &ids[..p],
        None => ids,
    };
    let codec = ctx.codec();
    if task.loss_space() == LossSpace::ImageLike {
        let img = tokens_to_image(ctx, ids)?;
        let (h, w) = ctx.opts.target_size;
        let (value, raster) = match task {
            TaskId::DepthEstimation => match dense_from_raster(&img, h, w, DenseTask::Depth, max_depth)? {
                DenseOutput::Depth(d) => (depth_summary(&d.data), img.to_gray()),
                DenseOutput::Normals(_) => unreachable!("depth task"),
            },
            TaskId::SurfaceNormals => (json!({"normals": {"height": h, "width": w}}), img),
            TaskId::ObjectSegmentation => (masks_summary(&img)?, img),
            _ => (json!({"image": {"height": img.height(), "width": img.width()}}), img),
        };
        let mut value = value;
        if let Some(p) = raster_path {
            write_raster(&raster.quantize_8bit(), p)?;
            value["raster"] = json!(p.display().to_string());
        }
        return Ok(value);
    }
    Ok(match task {
        TaskId::ObjectDetection | TaskId::ObjectLocalization => {
            let items = codec.parse_labeled_boxes(ids)?;
            json!({"boxes": items.iter().map(|(b, l)| json!({"bbox": b, "label": l})).collect::<Vec<_>>()})
        }
        TaskId::ReferringExpression => json!({"box": codec.decode_box(ids)?.0}),
        TaskId::KeypointEstimation => json!({"keypoints": codec.decode_keypoints(ids, false)?}),
        _ => json!({"text": ctx.tok.decode(ids)?}),
    })
}

pub fn depth_summary(d: &[f64]) -> Value {
    let n = d.len().max(1) as f64;
    json!({"depth": {
        "mean": d.iter().sum::<f64>() / n,
        "min": d.iter().copied().fold(f64::INFINITY, f64::min),
        "max": d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }})
}

pub fn masks_summary(img: &RasterImage) -> Result<Value, CliError> {
    let m = raster_to_masks(&img.to_rgb(), &palette())?;
    Ok(json!({"instances": m.instances.iter().map(|i| json!({"color": i.label, "area": i.area()})).collect::<Vec<_>>()}))
}

pub fn detokenize(cfg: &RunConfig) -> Result<(), CliError> {
    let task = cfg.require_task()?;
    let input = cfg.require(&cfg.input, "input")?;
    let art = Artifacts::load(cfg, false)?;
    let text = std::fs::read_to_string(input).map_err(uio_core::Error::from)?;
    let ids = parse_token_file(&text)?;
    let v = decode_target(&art.ctx(), task, &ids, cfg.max_depth, cfg.out.as_deref())?;
    println!("{}", serde_json::to_string_pretty(&v).expect("serializable"));
    Ok(())
}
