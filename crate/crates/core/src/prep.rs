//! Artifacts derived from a manifest before training: the tokenizer corpus
//! and the rasters a VQ tokenizer has to represent.

use crate::data_io::Manifest;
use crate::error::Result;
use crate::raster::RasterImage;
use crate::taskgen::{target_raster, PromptRegistry, TaskId};

/// Record text, labels and rendered prompts, in manifest order.
pub fn tokenizer_corpus(m: &Manifest, prompts: &PromptRegistry) -> Vec<String> {
    let mut c: Vec<String> = Vec::new();
    for d in &m.datasets {
        for r in &d.records {
            c.extend(r.text.clone());
            c.extend(r.question.clone());
            c.extend(r.answer.clone());
            c.extend(r.label.clone());
            c.extend(r.boxes.iter().map(|b| b.label.clone()));
            if let Some(l) = &r.label {
                for t in [TaskId::ObjectLocalization, TaskId::ObjectSegmentation] {
                    if let Ok(tpl) = prompts.template(t, 0) {
                        c.push(tpl.template.replace("{CLASS}", l));
                    }
                }
            }
        }
    }
    let fixed = [TaskId::ImageCaptioning, TaskId::DepthEstimation, TaskId::KeypointEstimation];
    let mut extra: Vec<TaskId> = m
        .datasets
        .iter()
        .map(|d| d.task)
        .filter(|t| !fixed.contains(t) && !matches!(t, TaskId::ObjectLocalization | TaskId::ObjectSegmentation))
        .collect();
    extra.sort();
    extra.dedup();
    for t in fixed.into_iter().chain(extra) {
        if let Ok(tpl) = prompts.template(t, 0) {
            c.push(tpl.template.clone());
        }
    }
    c
}

/// Vision-token targets of every record, resized to `size` when given.
pub fn vq_images(m: &Manifest, size: Option<(usize, usize)>) -> Result<Vec<RasterImage>> {
    let mut out = Vec::new();
    for d in &m.datasets {
        for r in &d.records {
            if let Some(img) = target_raster(d.task, r)? {
                out.push(match size {
                    Some((h, w)) => img.resize_nearest(h, w)?,
                    None => img,
                });
            }
        }
    }
    Ok(out)
}
