//! `train-vq`, `pretrain`, `multitask` and `audit`.

use std::path::Path;

use uio_core::checkpoint::Checkpoint;
use uio_core::data_io::{load_manifest, Manifest};
use uio_core::model::{Model, ModelConfig};
use uio_core::prep::{tokenizer_corpus, vq_images};
use uio_core::rng::derive_seed;
use uio_core::sampler::Audit;
use uio_core::taskgen::{LossSpace, PromptRegistry, TaskContext};
use uio_core::text_tok::SubwordModel;
use uio_core::trainer::{
    load_train_state, run_stage, Adafactor, AdafactorConfig, LrSchedule, Optimizer, Stage, StageData, TrainConfig,
    STATE_FILE,
};
use uio_core::vq::{self, VqConfig, VqModel, VqTrainOptions};

use crate::artifacts::{layout_for, task_options, MODEL_FILE, TOKENIZER_FILE, VQ_FILE};
use crate::config::RunConfig;
use crate::CliError;

fn manifest(cfg: &RunConfig) -> Result<Manifest, CliError> {
    Ok(load_manifest(cfg.require(&cfg.manifest, "manifest")?)?)
}

pub fn train_vq(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let out = cfg.require_out()?;
    let m = manifest(cfg)?;
    let vq_cfg = VqConfig::preset(&cfg.vq_preset)?;
    let opts = task_options(cfg, 1, None);
    let mut images = vq_images(&m, Some(opts.target_size))?;
    if images.len() < 2 {
        return Err(CliError::Usage(format!("manifest has {} image-like targets; need at least 2", images.len())));
    }
    let held = images.split_off(images.len() - (images.len() / 10).max(1));
    cfg.log_into(out, command)?;
    let steps = cfg.steps.unwrap_or(VqTrainOptions::default().steps as u64) as usize;
    let vq_opts = VqTrainOptions { steps, seed: derive_seed(cfg.seed, "vq"), ..VqTrainOptions::default() };
    log::info!("training VQ ({} codes, f={}) on {} rasters for {steps} steps", vq_cfg.codebook_size, vq_cfg.downsample, images.len());
    let (model, report) = vq::train_vq(&images, &held, vq_cfg, vq_opts)?;
    model.save(out.join(VQ_FILE))?;
    let report_json = serde_json::to_string_pretty(&report).map_err(uio_core::Error::from)?;
    std::fs::write(out.join("vq_report.json"), report_json).map_err(uio_core::Error::from)?;
    let mse = vq::heldout_mse(&model, &held)?;
    println!("held-out MSE {mse:.5}, code usage {:.3}", report.usage);
    Ok(())
}

/// Tokenizer from `--tokenizer`, a previous run in `out`, or trained on the manifest.
fn tokenizer(cfg: &RunConfig, m: &Manifest, prompts: &PromptRegistry, out: &Path) -> Result<SubwordModel, CliError> {
    let saved = out.join(TOKENIZER_FILE);
    let tok = match (&cfg.tokenizer, saved.exists()) {
        (Some(p), _) => SubwordModel::load(p)?,
        (None, true) => SubwordModel::load(&saved)?,
        (None, false) => {
            log::info!("training a {}-entry BPE tokenizer on the manifest text", cfg.text_vocab);
            SubwordModel::train(&tokenizer_corpus(m, prompts), cfg.text_vocab)?
        }
    };
    tok.save(&saved)?;
    Ok(tok)
}

fn vq_model(cfg: &RunConfig, out: &Path) -> Result<Option<VqModel>, CliError> {
    let saved = out.join(VQ_FILE);
    let vq = match (&cfg.vq, saved.exists()) {
        (Some(p), _) => Some(VqModel::load(p)?),
        (None, true) => Some(VqModel::load(&saved)?),
        (None, false) => None,
    };
    if let Some(v) = &vq {
        v.save(&saved)?;
    }
    Ok(vq)
}

fn needs_vq(stage: Stage, m: &Manifest) -> bool {
    match stage {
        Stage::Pretrain => m.datasets.iter().any(|d| d.records.iter().any(|r| r.image.is_some())),
        Stage::Multitask => m.datasets.iter().any(|d| d.task.loss_space() == LossSpace::ImageLike),
    }
}

/// Runs a training stage in `--out`. A `state.ckpt` already there is resumed;
/// otherwise `--checkpoint` (model or training state) supplies initial
/// weights with a fresh optimizer, or the preset is initialized from the seed.
pub fn train(cfg: &RunConfig, stage: Stage, command: &str) -> Result<(), CliError> {
    let out = cfg.require_out()?;
    let steps = *cfg.require(&cfg.steps, "steps")?;
    let m = manifest(cfg)?;
    let data = StageData::for_stage(stage, &m)?;
    std::fs::create_dir_all(out).map_err(uio_core::Error::from)?;
    let vq = vq_model(cfg, out)?;
    if vq.is_none() && needs_vq(stage, &m) {
        return Err(CliError::Usage("this manifest has image-like targets; pass --vq (see train-vq)".into()));
    }
    let prompts = PromptRegistry::default();
    let tok = tokenizer(cfg, &m, &prompts, out)?;
    let layout = layout_for(&tok, vq.as_ref())?;
    let state = out.join(STATE_FILE);
    let (mut model, mut opt) = if state.exists() {
        let (model, opt) = load_train_state(&state)?;
        log::info!("resuming from {} at step {}", state.display(), opt.steps());
        (model, opt)
    } else {
        let model = match &cfg.checkpoint {
            Some(p) => Model::from_checkpoint(&Checkpoint::load(p)?)?,
            None => Model::new(ModelConfig::preset(&cfg.preset)?, layout.clone(), derive_seed(cfg.seed, "model"))?,
        };
        let schedule = LrSchedule { peak: cfg.lr, hold_steps: cfg.hold_steps.max(1) };
        let opt = Adafactor::new(AdafactorConfig { schedule, ..AdafactorConfig::default() }, &model.params);
        (model, opt)
    };
    if model.layout != layout {
        return Err(CliError::Usage(format!(
            "model vocabulary ({} ids) does not match tokenizer and VQ ({} ids)",
            model.layout.total(),
            layout.total()
        )));
    }
    cfg.log_into(out, command)?;
    let ctx = TaskContext {
        layout: &layout,
        tok: &tok,
        prompts: &prompts,
        vq: vq.as_ref(),
        opts: task_options(cfg, model.cfg.patch_size, None),
    };
    let patches = ctx.num_input_patches();
    let tc = TrainConfig {
        batch_size: cfg.batch_size,
        seed: derive_seed(cfg.seed, "train"),
        keep_patches: cfg.keep_patches.unwrap_or_else(|| stage.default_patches()).min(patches),
        negative_rate: cfg.negative_rate,
        checkpoint_every: cfg.checkpoint_every,
        audit_every: cfg.audit,
        ..TrainConfig::new(stage, steps)
    };
    let report = run_stage(&mut model, &mut opt, &m, &data, &ctx, &tc, Some(out))?;
    model.save(out.join(MODEL_FILE))?;
    match report.loss_ends((report.logs.len() / 4).max(1)) {
        Some((a, b)) => println!("{} steps done (now at {}); loss {a:.4} -> {b:.4}", report.logs.len(), opt.steps()),
        None => println!("nothing to do: already at step {}", opt.steps()),
    }
    Ok(())
}

pub fn audit(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let m = manifest(cfg)?;
    let data = StageData::for_stage(cfg.stage, &m)?;
    let steps = cfg.steps.unwrap_or(100);
    let seed = derive_seed(cfg.seed, "train");
    let draws: Vec<_> = (1..=steps).flat_map(|k| data.mixture.sample_batch(cfg.batch_size, seed, k)).collect();
    let table = Audit::from_draws(&data.mixture, &draws).to_table();
    if let Some(out) = &cfg.out {
        cfg.log_into(out, command)?;
        std::fs::write(out.join("audit.txt"), &table).map_err(uio_core::Error::from)?;
    }
    print!("{table}");
    Ok(())
}
