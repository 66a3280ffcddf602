//! Task examples: prompt, optional input image, and target token sequence.

pub mod denoise;
pub mod prompts;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

pub use denoise::{corrupt_text_spans, mask_image_patches, resplice};
pub use prompts::{render_prompt, tokenize_prompt, PromptRegistry, PromptTemplate, SlotType, SlotValue};

use crate::data_io::opt_raster_b64;
use crate::dense_codec::{
    color_name, depth_to_raster, normals_to_raster, palette, seg_to_raster, DepthMap, InstanceMask, InstanceMaskSet,
    NormalMap, Rgb,
};
use crate::error::{Error, Result};
use crate::raster::RasterImage;
use crate::sampler::TaskGroup;
use crate::sparse_codec::{KeypointSet, NormBox, SparseCodec};
use crate::text_tok::SubwordModel;
use crate::vocab::VocabLayout;
use crate::vq::VqModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    ImageGeneration,
    ImageInpainting,
    SegmentationToImage,
    ObjectDetection,
    ObjectLocalization,
    ReferringExpression,
    KeypointEstimation,
    ObjectSegmentation,
    DepthEstimation,
    SurfaceNormals,
    ImageClassification,
    ObjectCategorization,
    ImageCaptioning,
    RegionCaptioning,
    Vqa,
    GroundedVqa,
    RelationshipDetection,
    QuestionAnswering,
    TextClassification,
    Summarization,
    TextDenoising,
    ImageDenoising,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpace {
    TextLike,
    ImageLike,
}

impl TaskId {
    pub const ALL: [TaskId; 22] = [
        TaskId::ImageGeneration,
        TaskId::ImageInpainting,
        TaskId::SegmentationToImage,
        TaskId::ObjectDetection,
        TaskId::ObjectLocalization,
        TaskId::ReferringExpression,
        TaskId::KeypointEstimation,
        TaskId::ObjectSegmentation,
        TaskId::DepthEstimation,
        TaskId::SurfaceNormals,
        TaskId::ImageClassification,
        TaskId::ObjectCategorization,
        TaskId::ImageCaptioning,
        TaskId::RegionCaptioning,
        TaskId::Vqa,
        TaskId::GroundedVqa,
        TaskId::RelationshipDetection,
        TaskId::QuestionAnswering,
        TaskId::TextClassification,
        TaskId::Summarization,
        TaskId::TextDenoising,
        TaskId::ImageDenoising,
    ];

    pub fn name(self) -> String {
        serde_json::to_value(self).expect("serializes").as_str().expect("string").to_string()
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| Error::Task(format!("unknown task {s:?}")))
    }

    pub fn group(self) -> TaskGroup {
        use TaskId::*;
        match self {
            ImageGeneration | ImageInpainting | SegmentationToImage | ImageDenoising => TaskGroup::ImageSynthesis,
            ObjectDetection | ObjectLocalization | ReferringExpression | KeypointEstimation => TaskGroup::SparseLabelling,
            ObjectSegmentation | DepthEstimation | SurfaceNormals => TaskGroup::DenseLabelling,
            ImageClassification | ObjectCategorization => TaskGroup::ImageClassification,
            ImageCaptioning | RegionCaptioning => TaskGroup::ImageCaptioning,
            Vqa | GroundedVqa | RelationshipDetection => TaskGroup::VisionLanguage,
            QuestionAnswering | TextClassification | Summarization => TaskGroup::Nlp,
            TextDenoising => TaskGroup::LanguageModelling,
        }
    }

    pub fn loss_space(self) -> LossSpace {
        use TaskId::*;
        match self {
            ImageGeneration | ImageInpainting | SegmentationToImage | ObjectSegmentation | DepthEstimation
            | SurfaceNormals | ImageDenoising => LossSpace::ImageLike,
            _ => LossSpace::TextLike,
        }
    }

    /// Record fields a builder reads.
    pub fn required_fields(self) -> &'static [&'static str] {
        use TaskId::*;
        match self {
            ImageGeneration => &["image", "text"],
            ImageInpainting => &["image", "region", "label"],
            SegmentationToImage => &["image", "masks"],
            ObjectDetection => &["image"],
            ObjectLocalization => &["image", "label"],
            ReferringExpression => &["image", "text", "region"],
            KeypointEstimation => &["image", "region", "keypoints"],
            ObjectSegmentation => &["image", "label", "masks"],
            DepthEstimation => &["image", "depth"],
            SurfaceNormals => &["image", "normals"],
            ImageClassification => &["image", "label"],
            ObjectCategorization => &["image", "region", "label"],
            ImageCaptioning => &["image", "text"],
            RegionCaptioning => &["image", "region", "text"],
            Vqa => &["image", "question", "answer"],
            GroundedVqa => &["image", "question", "answer", "masks"],
            RelationshipDetection => &["image", "region", "region2", "answer"],
            QuestionAnswering => &["question", "text", "answer"],
            TextClassification => &["text", "question", "answer"],
            Summarization => &["text", "answer"],
            TextDenoising => &["text"],
            ImageDenoising => &["image"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: NormBox,
    pub label: String,
}

/// A raw annotated datum. Which fields are needed depends on the task; see
/// [`TaskId::required_fields`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_raster_b64")]
    pub image: Option<RasterImage>,
    /// File reference resolved into `image` by the manifest loader.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boxes: Vec<LabeledBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<NormBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region2: Option<NormBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<KeypointSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<DepthMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normals: Option<NormalMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<InstanceMaskSet>,
}

impl Record {
    fn has(&self, field: &str) -> bool {
        match field {
            "image" => self.image.is_some(),
            "text" => self.text.is_some(),
            "question" => self.question.is_some(),
            "answer" => self.answer.is_some(),
            "label" => self.label.is_some(),
            "region" => self.region.is_some(),
            "region2" => self.region2.is_some(),
            "keypoints" => self.keypoints.is_some(),
            "depth" => self.depth.is_some(),
            "normals" => self.normals.is_some(),
            "masks" => self.masks.is_some(),
            _ => false,
        }
    }
}

/// Checks that `rec` carries everything the task's builder reads and that
/// the structured fields are internally consistent. Returns the name of the
/// first offending field on failure.
pub fn validate_record(task: TaskId, rec: &Record) -> std::result::Result<(), (String, String)> {
    for f in task.required_fields() {
        if !rec.has(f) {
            return Err((f.to_string(), format!("{} needs field {f}", task.name())));
        }
    }
    let check = |field: &str, r: Result<()>| r.map_err(|e| (field.to_string(), e.to_string()));
    for (i, b) in rec.boxes.iter().enumerate() {
        check(&format!("boxes/{i}/bbox"), b.bbox.validate())?;
    }
    if let Some(b) = &rec.region {
        check("region", b.validate())?;
    }
    if let Some(b) = &rec.region2 {
        check("region2", b.validate())?;
    }
    if let Some(k) = &rec.keypoints {
        check("keypoints", k.validate())?;
    }
    if let Some(n) = &rec.normals {
        check("normals", n.validate())?;
    }
    if let Some(m) = &rec.masks {
        check("masks", m.validate())?;
    }
    if let Some(d) = &rec.depth {
        if d.data.len() != d.height * d.width || !(d.max_depth > 0.0) {
            return Err(("depth".into(), "depth map size or max_depth invalid".into()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub task: TaskId,
    pub input_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_raster_b64")]
    pub input_image: Option<RasterImage>,
    /// Patch indices (row-major over the input grid) replaced by the mask embedding.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub masked_patches: Vec<usize>,
    /// Without the trailing EOS.
    pub target_ids: Vec<usize>,
    pub loss_space: LossSpace,
    /// Raster form of an image-like or auxiliary target, kept for evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_raster_b64")]
    pub target_raster: Option<RasterImage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskOptions {
    pub input_size: (usize, usize),
    pub target_size: (usize, usize),
    pub patch_size: usize,
    pub max_text_in: usize,
    pub max_text_out: usize,
    pub max_image_out: usize,
    /// Which registry wording to use (0 = training prompt).
    pub prompt_variant: usize,
    pub noise_rate: f64,
    pub mean_span: f64,
    pub image_mask_rate: f64,
    pub modality_dropout: f64,
}

impl Default for TaskOptions {
    fn default() -> Self {
        Self {
            input_size: (384, 384),
            target_size: (256, 256),
            patch_size: 16,
            max_text_in: 256,
            max_text_out: 128,
            max_image_out: 256,
            prompt_variant: 0,
            noise_rate: denoise::DEFAULT_NOISE_RATE,
            mean_span: denoise::DEFAULT_MEAN_SPAN,
            image_mask_rate: denoise::DEFAULT_IMAGE_MASK_RATE,
            modality_dropout: 0.1,
        }
    }
}

pub const MULTIMODAL_PREFIX: &str = "An image of";

pub struct TaskContext<'a> {
    pub layout: &'a VocabLayout,
    pub tok: &'a SubwordModel,
    pub prompts: &'a PromptRegistry,
    pub vq: Option<&'a VqModel>,
    pub opts: TaskOptions,
}

/// Deterministic instance colors: bright palette entries in farthest-first
/// order (from black and from each other), starting at red.
pub fn instance_colors(n: usize) -> Result<Vec<Rgb>> {
    let cands: Vec<Rgb> = palette().into_iter().filter(|c| c.iter().any(|&v| v == 240)).collect();
    if n > cands.len() {
        return Err(Error::Codec(format!("{n} instances exceed {} instance colors", cands.len())));
    }
    let d2 = |a: &Rgb, b: &Rgb| (0..3).map(|i| (a[i] as i64 - b[i] as i64).pow(2)).sum::<i64>();
    let mut chosen: Vec<Rgb> = Vec::with_capacity(n);
    let mut anchors: Vec<Rgb> = vec![[0, 0, 0]];
    while chosen.len() < n {
        let next = if chosen.is_empty() {
            [240, 48, 48]
        } else {
            *cands
                .iter()
                .filter(|c| !chosen.contains(c))
                .max_by_key(|c| (anchors.iter().map(|a| d2(c, a)).min().unwrap_or(0), std::cmp::Reverse(**c)))
                .expect("enough candidates")
        };
        chosen.push(next);
        anchors.push(next);
    }
    Ok(chosen)
}

/// Keeps instances of `label`, ordered by first pixel, recolored with [`instance_colors`].
pub fn class_instances(m: &InstanceMaskSet, label: &str) -> Result<InstanceMaskSet> {
    let mut inst: Vec<&InstanceMask> = m.instances.iter().filter(|i| i.label == label).collect();
    inst.sort_by_key(|i| i.mask.iter().position(|&b| b).unwrap_or(usize::MAX));
    let colors = instance_colors(inst.len())?;
    Ok(InstanceMaskSet {
        height: m.height,
        width: m.width,
        instances: inst
            .into_iter()
            .zip(colors)
            .map(|(i, color)| InstanceMask { label: i.label.clone(), mask: i.mask.clone(), color })
            .collect(),
    })
}

impl TaskContext<'_> {
    pub fn codec(&self) -> SparseCodec<'_> {
        SparseCodec::new(self.layout, self.tok)
    }

    pub fn prompt_ids(&self, task: TaskId, slots: &[(&str, SlotValue)]) -> Result<Vec<usize>> {
        let t = self.prompts.template(task, self.opts.prompt_variant)?;
        let slots: BTreeMap<String, SlotValue> = slots.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        let s = render_prompt(&t, &slots, self.layout.num_locations())?;
        tokenize_prompt(self.tok, self.layout, &s)
    }

    pub fn input_image(&self, r: &RasterImage) -> Result<RasterImage> {
        let (h, w) = self.opts.input_size;
        Ok(r.to_rgb().resize_nearest(h, w)?)
    }

    /// Vision-band ids of `r` after resizing to the target size.
    pub fn vision_target(&self, r: &RasterImage) -> Result<Vec<usize>> {
        let vq = self.vq.ok_or_else(|| Error::Config("image-like targets need a VQ tokenizer".into()))?;
        let (h, w) = self.opts.target_size;
        let g = vq.encode_image(&r.to_rgb().resize_nearest(h, w)?)?;
        g.codes.iter().map(|&c| self.layout.vision_id(c)).collect()
    }

    pub fn num_input_patches(&self) -> usize {
        let (h, w) = self.opts.input_size;
        (h / self.opts.patch_size) * (w / self.opts.patch_size)
    }

    fn finish(
        &self,
        task: TaskId,
        input_ids: Vec<usize>,
        input_image: Option<RasterImage>,
        target_ids: Vec<usize>,
        target_raster: Option<RasterImage>,
    ) -> Result<TaskExample> {
        let ex = TaskExample {
            task,
            input_ids,
            input_image,
            masked_patches: Vec::new(),
            target_ids,
            loss_space: task.loss_space(),
            target_raster,
        };
        self.check_example(&ex)?;
        Ok(ex)
    }

    /// Length caps and band purity.
    pub fn check_example(&self, ex: &TaskExample) -> Result<()> {
        if ex.input_ids.len() > self.opts.max_text_in {
            return Err(Error::Truncation { what: "input text".into(), len: ex.input_ids.len(), cap: self.opts.max_text_in });
        }
        match ex.loss_space {
            LossSpace::TextLike => {
                if ex.target_ids.len() > self.opts.max_text_out {
                    return Err(Error::Truncation {
                        what: "text target".into(),
                        len: ex.target_ids.len(),
                        cap: self.opts.max_text_out,
                    });
                }
                if ex.target_ids.iter().any(|&i| self.layout.is_vision(i)) {
                    return Err(Error::Task("text-like target contains vision tokens".into()));
                }
            }
            LossSpace::ImageLike => {
                if ex.target_ids.len() > self.opts.max_image_out {
                    return Err(Error::Truncation {
                        what: "image target".into(),
                        len: ex.target_ids.len(),
                        cap: self.opts.max_image_out,
                    });
                }
                if !ex.target_ids.iter().all(|&i| self.layout.is_vision(i)) {
                    return Err(Error::Task("image-like target contains non-vision tokens".into()));
                }
            }
        }
        Ok(())
    }
}

fn field<'r, T>(v: &'r Option<T>, name: &str) -> Result<&'r T> {
    v.as_ref().ok_or_else(|| Error::Task(format!("record is missing {name}")))
}

/// Builds one example for `task` from `rec`.
pub fn build_example<R: Rng + RngCore>(ctx: &TaskContext, task: TaskId, rec: &Record, rng: &mut R) -> Result<TaskExample> {
    validate_record(task, rec).map_err(|(f, m)| Error::Task(format!("{f}: {m}")))?;
    use SlotValue as S;
    use TaskId::*;
    let text = |s: &Option<String>, n: &str| field(s, n).map(|s| S::Text(s.clone()));
    let img = || -> Result<RasterImage> { ctx.input_image(field(&rec.image, "image")?) };
    let enc = |s: &Option<String>, n: &str| -> Result<Vec<usize>> { Ok(ctx.tok.encode(field(s, n)?)) };
    match task {
        ImageGeneration => {
            let p = ctx.prompt_ids(task, &[("CAPTION", text(&rec.text, "text")?)])?;
            let target = field(&rec.image, "image")?;
            ctx.finish(task, p, None, ctx.vision_target(target)?, Some(target.clone()))
        }
        ImageInpainting => {
            let region = *field(&rec.region, "region")?;
            let p = ctx.prompt_ids(task, &[("REGION", S::Box(region)), ("CLASS", text(&rec.label, "label")?)])?;
            let mut input = img()?;
            blank_region(&mut input, &region);
            let target = field(&rec.image, "image")?;
            ctx.finish(task, p, Some(input), ctx.vision_target(target)?, Some(target.clone()))
        }
        SegmentationToImage => {
            let m = field(&rec.masks, "masks")?;
            let cmap = m
                .instances
                .iter()
                .map(|i| (color_name(i.color).unwrap_or_else(|| format!("{:?}", i.color)), i.label.clone()))
                .collect();
            let p = ctx.prompt_ids(task, &[("COLORMAP", S::ColorMap(cmap))])?;
            let (seg, _) = seg_to_raster(m)?;
            let target = field(&rec.image, "image")?;
            ctx.finish(task, p, Some(ctx.input_image(&seg)?), ctx.vision_target(target)?, Some(target.clone()))
        }
        ObjectDetection => {
            let p = ctx.prompt_ids(task, &[])?;
            let items: Vec<(NormBox, String)> = rec.boxes.iter().map(|b| (b.bbox, b.label.clone())).collect();
            let t = ctx.codec().encode_labeled_boxes(&items, Some(rng.random()))?;
            ctx.finish(task, p, Some(img()?), t, None)
        }
        ObjectLocalization => {
            let label = field(&rec.label, "label")?;
            let p = ctx.prompt_ids(task, &[("CLASS", S::Text(label.clone()))])?;
            let items: Vec<(NormBox, String)> =
                rec.boxes.iter().filter(|b| &b.label == label).map(|b| (b.bbox, b.label.clone())).collect();
            let t = ctx.codec().encode_labeled_boxes(&items, Some(rng.random()))?;
            ctx.finish(task, p, Some(img()?), t, None)
        }
        ReferringExpression => {
            let p = ctx.prompt_ids(task, &[("REFEXP", text(&rec.text, "text")?)])?;
            let t = ctx.codec().encode_box(field(&rec.region, "region")?)?.to_vec();
            ctx.finish(task, p, Some(img()?), t, None)
        }
        KeypointEstimation => {
            let p = ctx.prompt_ids(task, &[("REGION", S::Box(*field(&rec.region, "region")?))])?;
            let t = ctx.codec().encode_keypoints(field(&rec.keypoints, "keypoints")?)?;
            ctx.finish(task, p, Some(img()?), t, None)
        }
        ObjectSegmentation => {
            let label = field(&rec.label, "label")?;
            let p = ctx.prompt_ids(task, &[("CLASS", S::Text(label.clone()))])?;
            let (seg, _) = seg_to_raster(&class_instances(field(&rec.masks, "masks")?, label)?)?;
            ctx.finish(task, p, Some(img()?), ctx.vision_target(&seg)?, Some(seg))
        }
        DepthEstimation => {
            let p = ctx.prompt_ids(task, &[])?;
            let r = depth_to_raster(field(&rec.depth, "depth")?)?;
            ctx.finish(task, p, Some(img()?), ctx.vision_target(&r)?, Some(r))
        }
        SurfaceNormals => {
            let p = ctx.prompt_ids(task, &[])?;
            let r = normals_to_raster(field(&rec.normals, "normals")?)?;
            ctx.finish(task, p, Some(img()?), ctx.vision_target(&r)?, Some(r))
        }
        ImageClassification => {
            let p = ctx.prompt_ids(task, &[])?;
            ctx.finish(task, p, Some(img()?), enc(&rec.label, "label")?, None)
        }
        ObjectCategorization => {
            let p = ctx.prompt_ids(task, &[("REGION", S::Box(*field(&rec.region, "region")?))])?;
            ctx.finish(task, p, Some(img()?), enc(&rec.label, "label")?, None)
        }
        ImageCaptioning => {
            let p = ctx.prompt_ids(task, &[])?;
            ctx.finish(task, p, Some(img()?), enc(&rec.text, "text")?, None)
        }
        RegionCaptioning => {
            let p = ctx.prompt_ids(task, &[("REGION", S::Box(*field(&rec.region, "region")?))])?;
            ctx.finish(task, p, Some(img()?), enc(&rec.text, "text")?, None)
        }
        Vqa => {
            let p = ctx.prompt_ids(task, &[("QUESTION", text(&rec.question, "question")?)])?;
            ctx.finish(task, p, Some(img()?), enc(&rec.answer, "answer")?, None)
        }
        GroundedVqa => {
            let p = ctx.prompt_ids(task, &[("QUESTION", text(&rec.question, "question")?)])?;
            let (mask, _) = seg_to_raster(field(&rec.masks, "masks")?)?;
            ctx.finish(task, p, Some(img()?), enc(&rec.answer, "answer")?, Some(mask))
        }
        RelationshipDetection => {
            let slots = [("REGION", S::Box(*field(&rec.region, "region")?)), ("REGION2", S::Box(*field(&rec.region2, "region2")?))];
            let p = ctx.prompt_ids(task, &slots)?;
            ctx.finish(task, p, Some(img()?), enc(&rec.answer, "answer")?, None)
        }
        QuestionAnswering => {
            let p = ctx.prompt_ids(task, &[("QUESTION", text(&rec.question, "question")?), ("CONTEXT", text(&rec.text, "text")?)])?;
            ctx.finish(task, p, None, enc(&rec.answer, "answer")?, None)
        }
        TextClassification => {
            let p = ctx.prompt_ids(task, &[("TEXT", text(&rec.text, "text")?), ("QUERY", text(&rec.question, "question")?)])?;
            ctx.finish(task, p, None, enc(&rec.answer, "answer")?, None)
        }
        Summarization => {
            let p = ctx.prompt_ids(task, &[("TEXT", text(&rec.text, "text")?)])?;
            ctx.finish(task, p, None, enc(&rec.answer, "answer")?, None)
        }
        TextDenoising => {
            let keep_image = rec.image.is_some() && rng.random::<f64>() >= ctx.opts.modality_dropout;
            let body = field(&rec.text, "text")?;
            let mut ids = Vec::new();
            if keep_image {
                ids.extend(ctx.tok.encode(MULTIMODAL_PREFIX));
            }
            let (corrupted, target) = corrupt_text_spans(&ctx.tok.encode(body), rng, ctx.opts.noise_rate, ctx.opts.mean_span)?;
            ids.extend(corrupted);
            let image = if keep_image { Some(img()?) } else { None };
            ctx.finish(task, ids, image, target, None)
        }
        ImageDenoising => {
            let keep_text = rec.text.is_some() && rng.random::<f64>() >= ctx.opts.modality_dropout;
            let ids = match (&rec.text, keep_text) {
                (Some(t), true) => ctx.tok.encode(&format!("{MULTIMODAL_PREFIX} {t}")),
                _ => Vec::new(),
            };
            let target_img = field(&rec.image, "image")?;
            let target = ctx.vision_target(target_img)?;
            let mut ex = ctx.finish(task, ids, Some(img()?), target, Some(target_img.clone()))?;
            let mask = mask_image_patches(ctx.num_input_patches(), rng, ctx.opts.image_mask_rate);
            ex.masked_patches = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
            Ok(ex)
        }
    }
}

/// The raster `task` serializes into vision tokens, if any.
pub fn target_raster(task: TaskId, rec: &Record) -> Result<Option<RasterImage>> {
    use TaskId::*;
    Ok(match task {
        ImageGeneration | ImageInpainting | SegmentationToImage | ImageDenoising => {
            Some(field(&rec.image, "image")?.to_rgb())
        }
        ObjectSegmentation => {
            Some(seg_to_raster(&class_instances(field(&rec.masks, "masks")?, field(&rec.label, "label")?)?)?.0)
        }
        DepthEstimation => Some(depth_to_raster(field(&rec.depth, "depth")?)?.to_rgb()),
        SurfaceNormals => Some(normals_to_raster(field(&rec.normals, "normals")?)?),
        _ => None,
    })
}

/// Sets every pixel whose center lies inside `b` to black.
pub fn blank_region(r: &mut RasterImage, b: &NormBox) {
    let (h, w) = (r.height(), r.width());
    let black = vec![0.0; r.channels()];
    for y in 0..h {
        for x in 0..w {
            let (cy, cx) = ((y as f64 + 0.5) / h as f64, (x as f64 + 0.5) / w as f64);
            if cy >= b.y_min && cy <= b.y_max && cx >= b.x_min && cx <= b.x_max {
                r.set_pixel(y, x, &black);
            }
        }
    }
}

/// Localization example for a class absent from the image; `None` when every
/// class in `universe` is present.
pub fn build_negative_localization<R: Rng + RngCore>(
    ctx: &TaskContext,
    rec: &Record,
    universe: &[String],
    rng: &mut R,
) -> Result<Option<TaskExample>> {
    let present: BTreeSet<&str> = rec.boxes.iter().map(|b| b.label.as_str()).collect();
    let absent: Vec<&String> = universe.iter().filter(|c| !present.contains(c.as_str())).collect();
    if absent.is_empty() {
        return Ok(None);
    }
    let class = absent[rng.random_range(0..absent.len())];
    let p = ctx.prompt_ids(TaskId::ObjectLocalization, &[("CLASS", SlotValue::Text(class.clone()))])?;
    let image = ctx.input_image(field(&rec.image, "image")?)?;
    ctx.finish(TaskId::ObjectLocalization, p, Some(image), Vec::new(), None).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense_codec::InstanceMask;
    use crate::vq::VqConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        layout: VocabLayout,
        tok: SubwordModel,
        prompts: PromptRegistry,
        vq: VqModel,
    }

    fn fixture() -> Fixture {
        let tok = SubwordModel::bytes_only();
        Fixture {
            layout: VocabLayout::new(tok.id_limit(), 1000, 16).unwrap(),
            tok,
            prompts: PromptRegistry::default(),
            vq: VqModel::new(VqConfig { codebook_size: 16, latent_dim: 4, downsample: 8, hidden: 8, beta: 0.25 }, 0).unwrap(),
        }
    }

    fn ctx(f: &Fixture) -> TaskContext<'_> {
        TaskContext {
            layout: &f.layout,
            tok: &f.tok,
            prompts: &f.prompts,
            vq: Some(&f.vq),
            opts: TaskOptions { input_size: (32, 32), target_size: (32, 32), patch_size: 8, ..Default::default() },
        }
    }

    fn square_record() -> Record {
        let mut img = RasterImage::filled(32, 32, 3, 0.0).unwrap();
        for y in 8..16 {
            for x in 16..24 {
                img.set_pixel(y, x, &[1.0, 0.0, 0.0]);
            }
        }
        let mut mask = vec![false; 32 * 32];
        for y in 8..16 {
            for x in 16..24 {
                mask[y * 32 + x] = true;
            }
        }
        Record {
            image: Some(img),
            label: Some("cat".into()),
            boxes: vec![LabeledBox { bbox: NormBox::new(0.25, 0.5, 0.5, 0.75), label: "cat".into() }],
            masks: Some(InstanceMaskSet {
                height: 32,
                width: 32,
                instances: vec![InstanceMask { label: "cat".into(), mask, color: [240, 48, 48] }],
            }),
            depth: Some(DepthMap { height: 32, width: 32, data: vec![2.5; 1024], max_depth: 10.0 }),
            ..Default::default()
        }
    }

    #[test]
    fn localization_and_negative() {
        let f = fixture();
        let c = ctx(&f);
        let rec = square_record();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ex = build_example(&c, TaskId::ObjectLocalization, &rec, &mut rng).unwrap();
        let expected = c.codec().encode_labeled_boxes(&[(rec.boxes[0].bbox, "cat".into())], None).unwrap();
        assert_eq!(ex.target_ids, expected);
        assert_eq!(f.tok.decode(&ex.input_ids).unwrap(), "What region does \" cat \" describe ?");
        let universe: Vec<String> = ["cat", "dog", "car"].iter().map(|s| s.to_string()).collect();
        for seed in 0..50 {
            let neg = build_negative_localization(&c, &rec, &universe, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().unwrap();
            assert!(neg.target_ids.is_empty());
            let prompt = f.tok.decode(&neg.input_ids).unwrap();
            assert!(!prompt.contains("\" cat \""));
        }
        let a = build_negative_localization(&c, &rec, &universe, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, build_negative_localization(&c, &rec, &universe, &mut ChaCha8Rng::seed_from_u64(9)).unwrap());
        assert!(build_negative_localization(&c, &rec, &universe[..1], &mut rng).unwrap().is_none());
    }

    #[test]
    fn depth_uses_static_prompt_and_vision_target() {
        let f = fixture();
        let c = ctx(&f);
        let ex = build_example(&c, TaskId::DepthEstimation, &square_record(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(f.tok.decode(&ex.input_ids).unwrap(), "What is the depth map of the image ?");
        assert_eq!(ex.target_ids.len(), 16);
        assert!(ex.target_ids.iter().all(|&i| f.layout.is_vision(i)));
        assert_eq!(ex.loss_space, LossSpace::ImageLike);
    }

    #[test]
    fn segmentation_and_missing_fields() {
        let f = fixture();
        let c = ctx(&f);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ex = build_example(&c, TaskId::ObjectSegmentation, &square_record(), &mut rng).unwrap();
        let seg = ex.target_raster.unwrap();
        assert_eq!(seg.pixel(0, 0), &[0.0, 0.0, 0.0]);
        let err = build_example(&c, TaskId::ImageCaptioning, &square_record(), &mut rng).unwrap_err();
        assert!(err.to_string().contains("text"), "{err}");
    }

    #[test]
    fn over_length_targets_error() {
        let f = fixture();
        let c = ctx(&f);
        let rec = Record { image: square_record().image, text: Some("x".repeat(200)), ..Default::default() };
        let e = build_example(&c, TaskId::ImageCaptioning, &rec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(e, Error::Truncation { .. }));
    }

    #[test]
    fn denoising_examples() {
        let f = fixture();
        let c = ctx(&f);
        let rec = Record { text: Some("the quick brown fox jumps over the lazy dog".into()), ..Default::default() };
        let ex = build_example(&c, TaskId::TextDenoising, &rec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(resplice(&ex.input_ids, &ex.target_ids).unwrap(), f.tok.encode(rec.text.as_ref().unwrap()));
        let img = build_example(&c, TaskId::ImageDenoising, &square_record(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(img.masked_patches.len(), 12);
        assert_eq!(img.target_ids.len(), 16);
    }

    #[test]
    fn inpainting_blanks_region() {
        let f = fixture();
        let c = ctx(&f);
        let mut rec = square_record();
        rec.region = Some(NormBox::new(0.25, 0.5, 0.5, 0.75));
        let ex = build_example(&c, TaskId::ImageInpainting, &rec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let inp = ex.input_image.unwrap();
        assert_eq!(inp.pixel(10, 20), &[0.0, 0.0, 0.0]);
        assert_eq!(ex.target_raster.unwrap().pixel(10, 20), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn example_json_round_trip() {
        let f = fixture();
        let c = ctx(&f);
        let ex = build_example(&c, TaskId::ObjectLocalization, &square_record(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s = serde_json::to_string(&ex).unwrap();
        assert_eq!(serde_json::from_str::<TaskExample>(&s).unwrap(), ex);
        assert_eq!(TaskId::parse("object_localization").unwrap(), TaskId::ObjectLocalization);
        assert!(TaskId::parse("nope").is_err());
    }

    #[test]
    fn instance_color_order_is_fixed() {
        let c = instance_colors(6).unwrap();
        assert_eq!(c.len(), 6);
        assert_eq!(c, instance_colors(6).unwrap());
        for (i, a) in c.iter().enumerate() {
            assert!(!c[..i].contains(a));
        }
    }
}
