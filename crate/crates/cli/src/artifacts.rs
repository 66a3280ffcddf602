//! Loading the model, tokenizer and VQ tokenizer a command works with.
//!
//! Paths not given explicitly are looked up next to `--checkpoint`
//! (`tokenizer.json`, `vq.ckpt`), which is how training commands lay out
//! their output directory.

use std::path::{Path, PathBuf};

use uio_core::checkpoint::Checkpoint;
use uio_core::model::{Model, ModelConfig};
use uio_core::sparse_codec::DEFAULT_BINS;
use uio_core::taskgen::{PromptRegistry, TaskContext, TaskOptions};
use uio_core::text_tok::SubwordModel;
use uio_core::vocab::VocabLayout;
use uio_core::vq::VqModel;

use crate::config::RunConfig;
use crate::CliError;

pub const TOKENIZER_FILE: &str = "tokenizer.json";
pub const VQ_FILE: &str = "vq.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";

pub struct Artifacts {
    pub tok: SubwordModel,
    pub vq: Option<VqModel>,
    pub model: Option<Model>,
    pub layout: VocabLayout,
    pub prompts: PromptRegistry,
    pub opts: TaskOptions,
}

/// Text band sized to the tokenizer; vision band to the codebook (or the
/// default size when there is no VQ tokenizer).
pub fn layout_for(tok: &SubwordModel, vq: Option<&VqModel>) -> Result<VocabLayout, CliError> {
    let vision = vq.map_or(VocabLayout::default().num_vision(), |v| v.cfg.codebook_size);
    Ok(VocabLayout::new(tok.id_limit(), DEFAULT_BINS, vision)?)
}

/// Image sizes from the flags, else from a run configuration saved in `dir`.
pub fn task_options(cfg: &RunConfig, patch_size: usize, dir: Option<&Path>) -> TaskOptions {
    let saved = |key: &str| -> Option<usize> {
        let dir = dir?;
        for (file, pointer) in [("run_config.json", format!("/config/{key}")), ("config.json", format!("/{key}"))] {
            let text = std::fs::read_to_string(dir.join(file)).ok()?;
            let v: serde_json::Value = serde_json::from_str(&text).ok()?;
            if let Some(n) = v.pointer(&pointer).and_then(|x| x.as_u64()) {
                return Some(n as usize);
            }
        }
        None
    };
    let d = TaskOptions::default();
    let input = cfg.image_size.or_else(|| saved("image_size")).unwrap_or(d.input_size.0);
    let target = cfg.target_size.or(cfg.image_size).or_else(|| saved("target_size")).or_else(|| saved("image_size"));
    let target = target.unwrap_or(d.target_size.0);
    TaskOptions { input_size: (input, input), target_size: (target, target), patch_size, ..d }
}

fn sibling(cfg: &RunConfig, name: &str) -> Option<PathBuf> {
    let dir = cfg.checkpoint.as_ref()?.parent()?;
    Some(dir.join(name)).filter(|p| p.exists())
}

impl Artifacts {
    pub fn load(cfg: &RunConfig, need_model: bool) -> Result<Self, CliError> {
        let model = match &cfg.checkpoint {
            Some(p) => Some(Model::from_checkpoint(&Checkpoint::load(p)?)?),
            None if need_model => return Err(CliError::Usage("--checkpoint is required".into())),
            None => None,
        };
        let tok = match cfg.tokenizer.clone().or_else(|| sibling(cfg, TOKENIZER_FILE)) {
            Some(p) => SubwordModel::load(p)?,
            None => SubwordModel::bytes_only(),
        };
        let vq = cfg.vq.clone().or_else(|| sibling(cfg, VQ_FILE)).map(VqModel::load).transpose()?;
        let layout = match &model {
            Some(m) => m.layout.clone(),
            None => layout_for(&tok, vq.as_ref())?,
        };
        tok.check_fits(&layout)?;
        if let Some(v) = &vq {
            if v.cfg.codebook_size != layout.num_vision() {
                return Err(CliError::Usage(format!(
                    "VQ codebook has {} entries but the vocabulary has {} vision tokens",
                    v.cfg.codebook_size,
                    layout.num_vision()
                )));
            }
        }
        let patch = match &model {
            Some(m) => m.cfg.patch_size,
            None => ModelConfig::preset(&cfg.preset)?.patch_size,
        };
        let dir = cfg.checkpoint.as_deref().and_then(Path::parent);
        let opts = task_options(cfg, patch, dir);
        Ok(Self { tok, vq, model, layout, prompts: PromptRegistry::default(), opts })
    }

    pub fn ctx(&self) -> TaskContext<'_> {
        TaskContext { layout: &self.layout, tok: &self.tok, prompts: &self.prompts, vq: self.vq.as_ref(), opts: self.opts }
    }
}
