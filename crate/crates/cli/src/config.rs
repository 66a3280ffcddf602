//! Run configuration: an optional JSON file overlaid by command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use uio_core::infer::DecodeMode;
use uio_core::model::ModelConfig;
use uio_core::taskgen::TaskId;
use uio_core::trainer::Stage;
use uio_core::vq::VqConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub steps: Option<u64>,
    pub decode_mode: String,
    /// Mixture audit interval in steps; 0 disables it.
    pub audit: u64,
    pub task: Option<String>,
    pub input: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub vq: Option<PathBuf>,
    pub vq_preset: String,
    pub batch_size: usize,
    pub lr: f64,
    pub hold_steps: u64,
    pub checkpoint_every: u64,
    /// BPE vocabulary budget when no tokenizer is given.
    pub text_vocab: usize,
    /// Square input size; also the target size unless `target_size` is set.
    pub image_size: Option<usize>,
    pub target_size: Option<usize>,
    pub keep_patches: Option<usize>,
    pub negative_rate: f64,
    pub max_depth: f64,
    /// Stage whose mixture `audit` draws from.
    pub stage: Stage,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "micro".into(),
            seed: 0,
            manifest: None,
            checkpoint: None,
            out: None,
            steps: None,
            decode_mode: "greedy".into(),
            audit: 0,
            task: None,
            input: None,
            tokenizer: None,
            vq: None,
            vq_preset: "toy".into(),
            batch_size: 8,
            lr: 1e-2,
            hold_steps: 10_000,
            checkpoint_every: 1000,
            text_vocab: 1024,
            image_size: None,
            target_size: None,
            keep_patches: None,
            negative_rate: 0.0,
            max_depth: uio_core::dense_codec::DEFAULT_MAX_DEPTH,
            stage: Stage::Multitask,
        }
    }
}

/// Flags shared by every command; each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model preset (micro, small, base, large, xl).
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Model, training-state or VQ checkpoint, depending on the command.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub steps: Option<u64>,
    /// greedy or beam:N.
    #[arg(long, global = true)]
    pub decode_mode: Option<String>,
    /// Log a mixture audit table every N steps.
    #[arg(long, global = true, value_name = "N")]
    pub audit: Option<u64>,
    /// Task id, e.g. object_localization.
    #[arg(long, global = true)]
    pub task: Option<String>,
    /// Record JSONL (tokenize, infer) or token file (detokenize).
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    #[arg(long, global = true)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long, global = true)]
    pub vq: Option<PathBuf>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub image_size: Option<usize>,
    /// Stage for `audit`: pretrain or multitask.
    #[arg(long, global = true)]
    pub stage: Option<String>,
}

impl RunConfig {
    pub fn resolve(flags: &Flags) -> Result<Self, CliError> {
        let mut c = match &flags.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = &flags.$f { c.$f = v.clone().into(); })*};
        }
        set!(preset, seed, decode_mode, audit, batch_size, lr);
        macro_rules! set_opt {
            ($($f:ident),*) => {$(if flags.$f.is_some() { c.$f = flags.$f.clone(); })*};
        }
        set_opt!(manifest, checkpoint, out, steps, task, input, tokenizer, vq, image_size);
        if let Some(s) = &flags.stage {
            c.stage = match s.as_str() {
                "pretrain" => Stage::Pretrain,
                "multitask" => Stage::Multitask,
                other => return Err(CliError::Usage(format!("unknown stage {other:?}"))),
            };
        }
        c.validate()?;
        Ok(c)
    }

    /// Cheap checks that run before any data is loaded.
    pub fn validate(&self) -> Result<(), CliError> {
        ModelConfig::preset(&self.preset).map_err(|e| CliError::Usage(e.to_string()))?;
        VqConfig::preset(&self.vq_preset).map_err(|e| CliError::Usage(e.to_string()))?;
        self.decode_mode()?;
        self.task_id()?;
        for (name, p) in [
            ("manifest", &self.manifest),
            ("checkpoint", &self.checkpoint),
            ("input", &self.input),
            ("tokenizer", &self.tokenizer),
            ("vq", &self.vq),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(CliError::Usage(format!("--{name} {} does not exist", p.display())));
                }
            }
        }
        if self.batch_size == 0 {
            return Err(CliError::Usage("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(CliError::Usage(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn decode_mode(&self) -> Result<DecodeMode, CliError> {
        self.decode_mode.parse().map_err(|e: uio_core::Error| CliError::Usage(e.to_string()))
    }

    pub fn task_id(&self) -> Result<Option<TaskId>, CliError> {
        match &self.task {
            None => Ok(None),
            Some(t) => TaskId::parse(t).map(Some).map_err(|_| {
                let names: Vec<String> = TaskId::ALL.iter().map(|t| t.name()).collect();
                CliError::Usage(format!("unknown task {t:?}; expected one of {}", names.join(", ")))
            }),
        }
    }

    pub fn require_task(&self) -> Result<TaskId, CliError> {
        self.task_id()?.ok_or_else(|| CliError::Usage("--task is required".into()))
    }

    pub fn require_out(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| CliError::Usage("--out is required".into()))
    }

    pub fn require<'a, T>(&self, v: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
        v.as_ref().ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
    }

    /// Writes the resolved configuration into `dir`.
    pub fn log_into(&self, dir: &Path, command: &str) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(uio_core::Error::from)?;
        let v = serde_json::json!({ "command": command, "config": self });
        std::fs::write(dir.join("run_config.json"), serde_json::to_string_pretty(&v).expect("serializable"))
            .map_err(uio_core::Error::from)?;
        Ok(())
    }
}
