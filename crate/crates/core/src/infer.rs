//! Decoding and task-level inference procedures.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dense_codec::{palette, raster_to_depth, raster_to_masks, raster_to_normals, DepthMap, InstanceMaskSet, NormalMap};
use crate::error::{Error, Result};
use crate::model::patch::patchify;
use crate::model::{teacher_inputs, with_eos, EncoderInput, Model, START_ID};
use crate::raster::RasterImage;
use crate::sparse_codec::{KeypointSet, NormBox, NormPoint};
use crate::taskgen::{SlotValue, TaskContext, TaskId};
use crate::vocab::{Band, VocabLayout, EOS_ID, NO_COORD_ID, PAD_ID};
use crate::vq::CodeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            _ => match s.strip_prefix("beam") {
                Some(w) => w
                    .trim_start_matches([':', '='])
                    .parse::<usize>()
                    .ok()
                    .filter(|&w| w >= 1)
                    .map(DecodeMode::Beam)
                    .ok_or_else(|| Error::Config(format!("bad beam width in {s:?}"))),
                None => Err(Error::Config(format!("decode mode must be greedy or beam:N, got {s:?}"))),
            },
        }
    }
}

/// Which bands may be emitted; `per_position[i]` applies at step `i` and the
/// last entry repeats. Empty means every band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub mode: DecodeMode,
    pub max_len: usize,
    pub bands: Vec<Vec<Band>>,
    pub banned: BTreeSet<usize>,
    pub allow_eos: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { mode: DecodeMode::Greedy, max_len: 128, bands: Vec::new(), banned: BTreeSet::new(), allow_eos: true }
    }
}

impl DecodeOptions {
    pub fn bands(mut self, b: &[Band]) -> Self {
        self.bands = vec![b.to_vec()];
        self
    }

    /// Exactly `n` vision tokens.
    pub fn image(n: usize) -> Self {
        Self { max_len: n, allow_eos: false, ..Self::default() }.bands(&[Band::Vision])
    }

    /// Text and location tokens (boxes, keypoints, labels).
    pub fn sparse(max_len: usize) -> Self {
        Self { max_len, ..Self::default() }.bands(&[Band::Text, Band::Location])
    }

    pub fn text(max_len: usize) -> Self {
        Self { max_len, ..Self::default() }.bands(&[Band::Text])
    }

    fn allowed_at(&self, layout: &VocabLayout, pos: usize) -> Vec<bool> {
        let v = layout.total();
        let mut ok = match self.bands.get(pos.min(self.bands.len().saturating_sub(1))) {
            None => vec![true; v],
            Some(bands) => (0..v).map(|id| layout.band_of(id).is_some_and(|b| bands.contains(&b))).collect(),
        };
        ok[PAD_ID] = false;
        ok[EOS_ID] = self.allow_eos;
        for &b in &self.banned {
            if b < v {
                ok[b] = false;
            }
        }
        ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    /// Without the closing EOS.
    pub tokens: Vec<usize>,
    /// Model log-probability of each emitted token, EOS included when emitted.
    pub logprobs: Vec<f64>,
    pub finished: bool,
}

impl Generated {
    pub fn total_logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    pub fn mean_logprob(&self) -> f64 {
        if self.logprobs.is_empty() {
            0.0
        } else {
            self.total_logprob() / self.logprobs.len() as f64
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Highest allowed entry; lowest id on ties.
fn best_allowed(lp: &[f64], allowed: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &a) in allowed.iter().enumerate() {
        if a && best.is_none_or(|b| lp[i] > lp[b]) {
            best = Some(i);
        }
    }
    best
}

/// Autoregressive decoding under the band mask and banned set.
pub fn generate(model: &Model, inp: &EncoderInput, opts: &DecodeOptions) -> Result<Generated> {
    model.check_input(inp)?;
    let cap = model.cfg.max_decoder_len() - 1;
    if opts.max_len > cap {
        return Err(Error::Config(format!("max_len {} exceeds decoder cap {cap}", opts.max_len)));
    }
    let enc = model.encode(inp)?;
    match opts.mode {
        DecodeMode::Greedy => greedy(model, &enc, opts),
        DecodeMode::Beam(0) => Err(Error::Config("beam width must be at least 1".into())),
        DecodeMode::Beam(w) => beam(model, &enc, opts, w),
    }
}

fn greedy(model: &Model, enc: &crate::nn::Tensor, opts: &DecodeOptions) -> Result<Generated> {
    let mut st = model.begin_decode(enc);
    let mut logits = model.step(&mut st, START_ID)?;
    let mut out = Generated { tokens: Vec::new(), logprobs: Vec::new(), finished: false };
    while out.tokens.len() < opts.max_len {
        let lp = log_softmax(&logits);
        let allowed = opts.allowed_at(&model.layout, out.tokens.len());
        let Some(t) = best_allowed(&lp, &allowed) else { break };
        out.logprobs.push(lp[t]);
        if t == EOS_ID {
            out.finished = true;
            return Ok(out);
        }
        out.tokens.push(t);
        if out.tokens.len() < opts.max_len {
            logits = model.step(&mut st, t)?;
        }
    }
    Ok(out)
}

#[derive(Clone)]
struct Hyp {
    gen: Generated,
    state: crate::model::DecodeState,
    logits: Vec<f64>,
}

/// Beam search ranking hypotheses by total log-probability; finished beams
/// leave the frontier. Candidate order breaks ties (lower id, earlier beam).
fn beam(model: &Model, enc: &crate::nn::Tensor, opts: &DecodeOptions, width: usize) -> Result<Generated> {
    let mut st = model.begin_decode(enc);
    let logits = model.step(&mut st, START_ID)?;
    let mut live = vec![Hyp { gen: Generated { tokens: Vec::new(), logprobs: Vec::new(), finished: false }, state: st, logits }];
    let mut done: Vec<Generated> = Vec::new();
    for pos in 0..opts.max_len {
        let allowed = opts.allowed_at(&model.layout, pos);
        let mut cands: Vec<(f64, usize, usize, f64)> = Vec::new();
        for (hi, h) in live.iter().enumerate() {
            let lp = log_softmax(&h.logits);
            let base = h.gen.total_logprob();
            for (t, &a) in allowed.iter().enumerate() {
                if a {
                    cands.push((base + lp[t], hi, t, lp[t]));
                }
            }
        }
        if cands.is_empty() {
            break;
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::new();
        for (_, hi, t, lp) in cands.into_iter().take(width) {
            let mut g = live[hi].gen.clone();
            g.logprobs.push(lp);
            if t == EOS_ID {
                g.finished = true;
                done.push(g);
                continue;
            }
            g.tokens.push(t);
            let mut state = live[hi].state.clone();
            let logits = if g.tokens.len() < opts.max_len { model.step(&mut state, t)? } else { Vec::new() };
            next.push(Hyp { gen: g, state, logits });
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if let Some(best_done) = done.iter().map(Generated::total_logprob).reduce(f64::max) {
            if live.iter().all(|h| h.gen.total_logprob() <= best_done) {
                break;
            }
        }
    }
    done.extend(live.into_iter().map(|h| h.gen));
    let mut best: Option<Generated> = None;
    for g in done {
        if best.as_ref().is_none_or(|b| g.total_logprob() > b.total_logprob()) {
            best = Some(g);
        }
    }
    best.ok_or_else(|| Error::Task("beam search produced no hypothesis".into()))
}

/// Teacher-forced log-probability of `target` followed by EOS.
pub fn sequence_logprob(model: &Model, enc: &crate::nn::Tensor, target: &[usize]) -> Result<f64> {
    let full = with_eos(target);
    let logits = model.decoder_logits(enc, &teacher_inputs(&full))?;
    Ok(full.iter().enumerate().map(|(r, &t)| log_softmax(logits.row(r))[t]).sum())
}

/// Candidates ranked by sequence log-probability (EOS included); the sort is
/// stable, so equal scores keep candidate order.
pub fn score_labels(model: &Model, ctx: &TaskContext, inp: &EncoderInput, candidates: &[String]) -> Result<Vec<(String, f64)>> {
    if candidates.is_empty() {
        return Err(Error::Task("score_labels needs at least one candidate".into()));
    }
    let enc = model.encode(inp)?;
    let mut scored = candidates
        .iter()
        .map(|c| Ok((c.clone(), sequence_logprob(model, &enc, &ctx.tok.encode(c))?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored)
}

/// Prompt ids plus every patch of the resized input image.
pub fn encoder_input(ctx: &TaskContext, prompt: Vec<usize>, image: Option<&RasterImage>) -> Result<EncoderInput> {
    let image = match image {
        Some(r) => Some(patchify(&ctx.input_image(r)?, ctx.opts.patch_size)?),
        None => None,
    };
    Ok(EncoderInput { text: prompt, image })
}

/// Number of vision tokens in an image-like target.
pub fn image_target_len(ctx: &TaskContext) -> Result<usize> {
    let vq = ctx.vq.ok_or_else(|| Error::Config("image outputs need a VQ tokenizer".into()))?;
    let f = vq.cfg.downsample;
    let (h, w) = ctx.opts.target_size;
    Ok((h / f) * (w / f))
}

/// Decodes vision ids to a raster through the VQ decoder.
pub fn tokens_to_image(ctx: &TaskContext, ids: &[usize]) -> Result<RasterImage> {
    let vq = ctx.vq.ok_or_else(|| Error::Config("image outputs need a VQ tokenizer".into()))?;
    let f = vq.cfg.downsample;
    let (h, w) = ctx.opts.target_size;
    let (rows, cols) = (h / f, w / f);
    if ids.len() != rows * cols {
        return Err(Error::Shape(format!("expected {} vision tokens, got {}", rows * cols, ids.len())));
    }
    let codes = ids
        .iter()
        .map(|&i| match ctx.layout.classify(i)? {
            (Band::Vision, c) => Ok(c),
            (b, _) => Err(Error::Codec(format!("token {i} is in the {b} band, expected vision"))),
        })
        .collect::<Result<Vec<_>>>()?;
    vq.decode_codes(&CodeGrid { rows, cols, codes })
}

/// Generates an image-like output for `task` and returns it at target size.
pub fn generate_image(model: &Model, ctx: &TaskContext, inp: &EncoderInput, mode: DecodeMode) -> Result<RasterImage> {
    let opts = DecodeOptions { mode, ..DecodeOptions::image(image_target_len(ctx)?) };
    let g = generate(model, inp, &opts)?;
    tokens_to_image(ctx, &g.tokens)
}

/// Boxes for `class` from the localization prompt.
pub fn localize(model: &Model, ctx: &TaskContext, image: &RasterImage, class: &str, mode: DecodeMode) -> Result<Vec<NormBox>> {
    let p = ctx.prompt_ids(TaskId::ObjectLocalization, &[("CLASS", SlotValue::Text(class.into()))])?;
    let g = generate(model, &encoder_input(ctx, p, Some(image))?, &DecodeOptions { mode, ..DecodeOptions::sparse(ctx.opts.max_text_out) })?;
    match ctx.codec().parse_labeled_boxes(&g.tokens) {
        Ok(items) => Ok(items.into_iter().filter(|(_, l)| l == class).map(|(b, _)| b).collect()),
        Err(e) => {
            log::warn!("localization output did not parse: {e}");
            Ok(Vec::new())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointResult {
    pub region: NormBox,
    pub keypoints: KeypointSet,
}

/// Localizes people, then decodes 17 joints per region with the no-coordinate
/// token banned. Coordinates are in the full-image frame. Regions whose output
/// does not parse are skipped with a warning.
pub fn keypoint_pipeline(model: &Model, ctx: &TaskContext, image: &RasterImage, mode: DecodeMode) -> Result<Vec<KeypointResult>> {
    let regions = localize(model, ctx, image, "person", mode)?;
    log::info!("keypoints: {} person region(s) found", regions.len());
    let mut out = Vec::new();
    for region in regions {
        let p = ctx.prompt_ids(TaskId::KeypointEstimation, &[("REGION", SlotValue::Box(region))])?;
        let mut opts = DecodeOptions { mode, ..DecodeOptions::sparse(3 * crate::sparse_codec::NUM_JOINTS) };
        opts.banned.insert(NO_COORD_ID);
        let g = generate(model, &encoder_input(ctx, p, Some(image))?, &opts)?;
        match ctx.codec().decode_keypoints(&g.tokens, true) {
            Ok(k) => {
                log::info!("keypoints: region {region:?} decoded");
                out.push(KeypointResult { region, keypoints: k });
            }
            Err(e) => log::warn!("keypoints: region {region:?} skipped: {e}"),
        }
    }
    Ok(out)
}

/// Start offsets of `window`-token windows advancing by `stride`; the last
/// window is aligned to the end so every token is covered.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if len <= window {
        return vec![0];
    }
    let stride = stride.max(1);
    let mut s: Vec<usize> = (0..).map(|i| i * stride).take_while(|&x| x + window < len).collect();
    s.push(len - window);
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaAnswer {
    pub answer: String,
    /// Length-normalized log-probability.
    pub score: f64,
    pub window: usize,
}

/// Answers over each context window and keeps the most confident answer.
pub fn sliding_window_qa(
    model: &Model,
    ctx: &TaskContext,
    question: &str,
    context: &str,
    window: usize,
    stride: usize,
) -> Result<QaAnswer> {
    if window == 0 || window > ctx.opts.max_text_in {
        return Err(Error::Config(format!("window must be in 1..={}", ctx.opts.max_text_in)));
    }
    let ids = ctx.tok.encode(context);
    let mut best: Option<QaAnswer> = None;
    for (wi, &s) in window_starts(ids.len(), window, stride).iter().enumerate() {
        let chunk = &ids[s..(s + window).min(ids.len())];
        let text = String::from_utf8_lossy(&ctx.tok.decode_bytes(chunk)?).into_owned();
        let p = ctx.prompt_ids(
            TaskId::QuestionAnswering,
            &[("QUESTION", SlotValue::Text(question.into())), ("CONTEXT", SlotValue::Text(text))],
        )?;
        let g = generate(model, &EncoderInput::text(p), &DecodeOptions::text(ctx.opts.max_text_out))?;
        let cand = QaAnswer { answer: ctx.tok.decode(&g.tokens)?, score: g.mean_logprob(), window: wi };
        if best.as_ref().is_none_or(|b| cand.score > b.score) {
            best = Some(cand);
        }
    }
    best.ok_or_else(|| Error::Task("no QA window".into()))
}

/// Generates a segmentation raster for `class`, resizes it to the image and
/// clusters it into instance masks (all labelled `class`).
pub fn segmentation_pipeline(model: &Model, ctx: &TaskContext, image: &RasterImage, class: &str, mode: DecodeMode) -> Result<InstanceMaskSet> {
    let p = ctx.prompt_ids(TaskId::ObjectSegmentation, &[("CLASS", SlotValue::Text(class.into()))])?;
    let r = generate_image(model, ctx, &encoder_input(ctx, p, Some(image))?, mode)?;
    let r = r.resize_nearest(image.height(), image.width())?;
    let mut m = raster_to_masks(&r.to_rgb(), &palette())?;
    for i in &mut m.instances {
        i.label = class.to_string();
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseTask {
    Depth,
    Normals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseOutput {
    Depth(DepthMap),
    Normals(NormalMap),
}

/// Decodes a dense-output raster at target size back to a map of the input
/// image's size.
pub fn dense_from_raster(r: &RasterImage, h: usize, w: usize, task: DenseTask, max_depth: f64) -> Result<DenseOutput> {
    let r = r.resize_nearest(h, w)?;
    Ok(match task {
        DenseTask::Depth => DenseOutput::Depth(raster_to_depth(&r.to_gray(), max_depth)?),
        DenseTask::Normals => DenseOutput::Normals(raster_to_normals(&r.to_rgb())?.0),
    })
}

pub fn dense_pipeline(
    model: &Model,
    ctx: &TaskContext,
    image: &RasterImage,
    task: DenseTask,
    max_depth: f64,
    mode: DecodeMode,
) -> Result<DenseOutput> {
    let t = match task {
        DenseTask::Depth => TaskId::DepthEstimation,
        DenseTask::Normals => TaskId::SurfaceNormals,
    };
    let p = ctx.prompt_ids(t, &[])?;
    let r = generate_image(model, ctx, &encoder_input(ctx, p, Some(image))?, mode)?;
    dense_from_raster(&r, image.height(), image.width(), task, max_depth)
}

pub fn generate_caption(model: &Model, ctx: &TaskContext, image: &RasterImage, mode: DecodeMode) -> Result<String> {
    let p = ctx.prompt_ids(TaskId::ImageCaptioning, &[])?;
    let g = generate(model, &encoder_input(ctx, p, Some(image))?, &DecodeOptions { mode, ..DecodeOptions::text(ctx.opts.max_text_out) })?;
    ctx.tok.decode(&g.tokens)
}

/// Image from a text description.
pub fn image_generation(model: &Model, ctx: &TaskContext, caption: &str, mode: DecodeMode) -> Result<RasterImage> {
    let p = ctx.prompt_ids(TaskId::ImageGeneration, &[("CAPTION", SlotValue::Text(caption.into()))])?;
    generate_image(model, ctx, &EncoderInput::text(p), mode)
}

/// Joint-level agreement: fraction of joints visible in `truth` whose
/// predicted bins are within `tol` bins on both axes.
pub fn keypoint_agreement(pred: &KeypointSet, truth: &KeypointSet, bins: usize, tol: usize) -> f64 {
    let bin = |v: f64| crate::sparse_codec::quantize_coord(v, bins).unwrap_or(usize::MAX / 2) as i64;
    let close = |a: NormPoint, b: NormPoint| {
        (bin(a.x) - bin(b.x)).unsigned_abs() as usize <= tol && (bin(a.y) - bin(b.y)).unsigned_abs() as usize <= tol
    };
    let mut n = 0;
    let mut ok = 0;
    for (p, t) in pred.joints.iter().zip(&truth.joints) {
        if let Some(tp) = t.point {
            n += 1;
            if p.point.is_some_and(|pp| close(pp, tp)) {
                ok += 1;
            }
        }
    }
    if n == 0 {
        1.0
    } else {
        ok as f64 / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::taskgen::{PromptRegistry, TaskOptions};
    use crate::text_tok::SubwordModel;
    use crate::vq::{VqConfig, VqModel};

    struct Fx {
        layout: VocabLayout,
        tok: SubwordModel,
        prompts: PromptRegistry,
        vq: VqModel,
        model: Model,
    }

    fn fx(seed: u64) -> Fx {
        let tok = SubwordModel::bytes_only();
        let layout = VocabLayout::new(tok.id_limit(), 1000, 8).unwrap();
        Fx {
            model: Model::new(ModelConfig::preset("micro").unwrap(), layout, seed).unwrap(),
            layout,
            tok,
            prompts: PromptRegistry::default(),
            vq: VqModel::new(VqConfig { codebook_size: 8, latent_dim: 4, downsample: 8, hidden: 8, beta: 0.25 }, 0).unwrap(),
        }
    }

    fn ctx(f: &Fx) -> TaskContext<'_> {
        TaskContext {
            layout: &f.layout,
            tok: &f.tok,
            prompts: &f.prompts,
            vq: Some(&f.vq),
            opts: TaskOptions { input_size: (32, 32), target_size: (32, 32), patch_size: 8, ..Default::default() },
        }
    }

    fn inp() -> EncoderInput {
        EncoderInput::text(vec![150, 151, 152, 153])
    }

    #[test]
    fn forced_single_token() {
        let f = fx(1);
        let mut opts = DecodeOptions { max_len: 9, allow_eos: false, ..Default::default() };
        opts.banned = (0..f.layout.total()).filter(|&i| i != 777).collect();
        let g = generate(&f.model, &inp(), &opts).unwrap();
        assert_eq!(g.tokens, vec![777; 9]);
    }

    #[test]
    fn greedy_equals_beam_one() {
        for seed in 0..4 {
            let f = fx(seed);
            let opts = DecodeOptions { max_len: 12, ..Default::default() };
            let a = generate(&f.model, &inp(), &opts).unwrap();
            let b = generate(&f.model, &inp(), &DecodeOptions { mode: DecodeMode::Beam(1), ..opts.clone() }).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn beam_is_at_least_as_likely_as_greedy() {
        let f = fx(5);
        let opts = DecodeOptions { max_len: 6, allow_eos: false, ..Default::default() };
        let g = generate(&f.model, &inp(), &opts).unwrap();
        let b = generate(&f.model, &inp(), &DecodeOptions { mode: DecodeMode::Beam(4), ..opts }).unwrap();
        assert!(b.total_logprob() >= g.total_logprob() - 1e-12);
    }

    #[test]
    fn band_masks_hold() {
        let f = fx(2);
        let g = generate(&f.model, &inp(), &DecodeOptions::image(16)).unwrap();
        assert_eq!(g.tokens.len(), 16);
        assert!(g.tokens.iter().all(|&t| f.layout.is_vision(t)));
        let mut kp = DecodeOptions::sparse(20);
        kp.banned.insert(NO_COORD_ID);
        let g = generate(&f.model, &inp(), &kp).unwrap();
        assert!(g.tokens.iter().all(|&t| !f.layout.is_vision(t) && t != NO_COORD_ID));
    }

    #[test]
    fn generated_logprobs_match_teacher_forcing() {
        let f = fx(3);
        let g = generate(&f.model, &inp(), &DecodeOptions { max_len: 5, allow_eos: false, ..Default::default() }).unwrap();
        let enc = f.model.encode(&inp()).unwrap();
        let logits = f.model.decoder_logits(&enc, &teacher_inputs(&with_eos(&g.tokens))).unwrap();
        for (i, &t) in g.tokens.iter().enumerate() {
            assert!((log_softmax(logits.row(i))[t] - g.logprobs[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn label_scoring() {
        let f = fx(4);
        let c = ctx(&f);
        let one = score_labels(&f.model, &c, &inp(), &["cat".into()]).unwrap();
        assert_eq!(one[0].0, "cat");
        let dup = score_labels(&f.model, &c, &inp(), &["dog".into(), "dog".into()]).unwrap();
        assert_eq!(dup[0].1, dup[1].1);
        let cands: Vec<String> = ["red", "green", "blue"].iter().map(|s| s.to_string()).collect();
        let r = score_labels(&f.model, &c, &inp(), &cands).unwrap();
        let enc = f.model.encode(&inp()).unwrap();
        for (label, s) in &r {
            let full = with_eos(&f.tok.encode(label));
            let mut expect = 0.0;
            for k in 0..full.len() {
                let l = f.model.decode_step(&enc, &full[..k]).unwrap();
                expect += log_softmax(&l)[full[k]];
            }
            assert!((expect - s).abs() < 1e-9);
        }
        let mut rev = cands.clone();
        rev.reverse();
        assert_eq!(score_labels(&f.model, &c, &inp(), &rev).unwrap()[0].0, r[0].0);
    }

    #[test]
    fn windows_tile_context() {
        assert_eq!(window_starts(5, 10, 4), vec![0]);
        for (len, w, s) in [(100, 30, 20), (31, 30, 7), (64, 16, 16), (50, 8, 3)] {
            let st = window_starts(len, w, s);
            let mut covered = vec![false; len];
            for &a in &st {
                assert!(a + w <= len);
                covered[a..a + w].iter_mut().for_each(|c| *c = true);
            }
            assert!(covered.iter().all(|&c| c), "{len} {w} {s}");
        }
    }

    #[test]
    fn dense_and_seg_decoders() {
        let gray = RasterImage::filled(16, 16, 3, 0.5).unwrap();
        match dense_from_raster(&gray, 32, 24, DenseTask::Depth, 10.0).unwrap() {
            DenseOutput::Depth(d) => {
                assert_eq!((d.height, d.width), (32, 24));
                assert!(d.data.iter().all(|&v| (v - 5.0).abs() < 1e-12));
            }
            _ => unreachable!(),
        }
        let black = RasterImage::filled(32, 32, 3, 0.0).unwrap();
        assert!(raster_to_masks(&black, &palette()).unwrap().instances.is_empty());
    }

    #[test]
    fn pipelines_run_on_untrained_model() {
        let f = fx(6);
        let c = ctx(&f);
        let img = RasterImage::filled(32, 32, 3, 0.3).unwrap();
        let m = segmentation_pipeline(&f.model, &c, &img, "red", DecodeMode::Greedy).unwrap();
        assert!(m.instances.iter().all(|i| i.area() >= 8));
        match dense_pipeline(&f.model, &c, &img, DenseTask::Depth, 10.0, DecodeMode::Greedy).unwrap() {
            DenseOutput::Depth(d) => assert_eq!((d.height, d.width), (32, 32)),
            _ => unreachable!(),
        }
        for r in keypoint_pipeline(&f.model, &c, &img, DecodeMode::Greedy).unwrap() {
            assert!(r.keypoints.joints.iter().all(|j| j.point.is_some()));
        }
        let qa = sliding_window_qa(&f.model, &c, "what ?", "abc", 64, 32).unwrap();
        assert_eq!(qa.window, 0);
        assert!("beam:3".parse::<DecodeMode>().unwrap() == DecodeMode::Beam(3));
        assert!("beam:0".parse::<DecodeMode>().is_err());
    }
}
