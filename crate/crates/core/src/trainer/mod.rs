//! Loss, batched gradients and the two-stage training driver.

pub mod optim;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use optim::{beta2, clip_global_norm, lr_schedule, Adafactor, AdafactorConfig, Adam, LrSchedule, Optimizer};

use crate::checkpoint::Checkpoint;
use crate::data_io::Manifest;
use crate::error::{Error, Result};
use crate::model::patch::{patchify, subsample_patches};
use crate::model::{with_eos, EncoderInput, Model};
use crate::nn::{Grads, Tape, Tensor, IGNORE};
use crate::par;
use crate::rng::{derive_seed, keyed_rng};
use crate::sampler::{Assignment, DatasetEntry, GroupEntry, Mixture, MixtureSpec};
use crate::taskgen::{build_example, build_negative_localization, Record, TaskContext, TaskExample, TaskId};

/// Mean cross-entropy of `logits` (one row per position) against `targets`,
/// skipping [`IGNORE`] positions.
pub fn token_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::Shape(format!("{} logit rows for {} targets", logits.rows(), targets.len())));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (r, &t) in targets.iter().enumerate() {
        if t == IGNORE {
            continue;
        }
        let row = logits.row(r);
        if t >= row.len() {
            return Err(Error::IdOutOfRange { id: t, total: row.len() });
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[t];
        n += 1;
    }
    if n == 0 {
        return Err(Error::Task("target has no scored positions".into()));
    }
    Ok(total / n as f64)
}

/// Encoder input for an example: prompt ids plus the input image's patches,
/// with masked patches flagged and at most `keep_patches` retained.
pub fn example_input<R: Rng>(ex: &TaskExample, patch_size: usize, keep_patches: usize, rng: &mut R) -> Result<EncoderInput> {
    let image = match &ex.input_image {
        None => None,
        Some(img) => {
            let mut p = patchify(img, patch_size)?;
            for &i in &ex.masked_patches {
                if i < p.masked.len() {
                    p.masked[i] = true;
                }
            }
            if p.len() > keep_patches {
                p = subsample_patches(&p, keep_patches, rng)?;
            }
            Some(p)
        }
    };
    Ok(EncoderInput { text: ex.input_ids.clone(), image })
}

/// Summed token loss, scored positions and gradients over a batch. Examples
/// are processed in parallel; gradients are merged in batch order.
pub fn batch_grads(model: &Model, batch: &[(EncoderInput, Vec<usize>)]) -> Result<(f64, usize, Grads)> {
    let parts = par::map(batch, |(inp, target)| -> Result<(f64, usize, Grads)> {
        let mut t = Tape::new(&model.params);
        let (l, n) = model.loss_var(&mut t, inp, target)?;
        let g = t.backward(l);
        Ok((t.value(l).item(), n, g))
    });
    let mut grads = Grads::empty(model.params.len());
    let (mut loss, mut count) = (0.0, 0usize);
    for p in parts {
        let (l, n, g) = p?;
        loss += l;
        count += n;
        grads.merge(g);
    }
    Ok((loss, count, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Multitask,
}

impl Stage {
    /// Image patches kept per example.
    pub fn default_patches(self) -> usize {
        match self {
            Stage::Pretrain => 128,
            Stage::Multitask => 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Total optimizer steps; a resumed run continues up to this count.
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub keep_patches: usize,
    pub clip_norm: f64,
    /// Probability that a localization slot is replaced by an absent-class example.
    pub negative_rate: f64,
    pub checkpoint_every: u64,
    pub audit_every: u64,
}

impl TrainConfig {
    pub fn new(stage: Stage, steps: u64) -> Self {
        Self {
            stage,
            steps,
            batch_size: 8,
            seed: 0,
            keep_patches: stage.default_patches(),
            clip_norm: 1.0,
            negative_rate: 0.0,
            checkpoint_every: 1000,
            audit_every: 100,
        }
    }
}

/// Record pools a stage samples from: per mixture dataset, the manifest
/// dataset index, the task to build and the usable record indices.
#[derive(Debug, Clone)]
pub struct StageData {
    pub mixture: Mixture,
    pools: Vec<Vec<Pool>>,
}

#[derive(Debug, Clone)]
struct Pool {
    dataset: usize,
    task: TaskId,
    records: Vec<usize>,
}

pub const TEXT_DENOISING_GROUP: &str = "text_denoising";
pub const IMAGE_DENOISING_GROUP: &str = "image_denoising";

impl StageData {
    /// Pretraining draws text and image denoising equally; each objective's
    /// datasets are the train datasets with records carrying text or an image.
    pub fn pretrain(m: &Manifest) -> Result<Self> {
        let mut groups = Vec::new();
        let mut pools = Vec::new();
        for (gid, task, has) in [
            (TEXT_DENOISING_GROUP, TaskId::TextDenoising, (|r: &Record| r.text.is_some()) as fn(&Record) -> bool),
            (IMAGE_DENOISING_GROUP, TaskId::ImageDenoising, |r: &Record| r.image.is_some()),
        ] {
            let mut entries = Vec::new();
            let mut gp = Vec::new();
            for (di, d) in m.datasets.iter().enumerate().filter(|(_, d)| d.split == "train") {
                let records: Vec<usize> = (0..d.records.len()).filter(|&i| has(&d.records[i])).collect();
                if !records.is_empty() {
                    entries.push(DatasetEntry { id: d.id.clone(), size: records.len() as f64 });
                    gp.push(Pool { dataset: di, task, records });
                }
            }
            if entries.is_empty() {
                return Err(Error::Config(format!("pretraining needs data for {gid}")));
            }
            groups.push(GroupEntry { id: gid.into(), rate: 0.5, datasets: entries });
            pools.push(gp);
        }
        Ok(Self { mixture: Mixture::new(MixtureSpec { temperature: m.pretrain_temperature, groups })?, pools })
    }

    /// Multi-task training over the manifest's train datasets.
    pub fn multitask(m: &Manifest) -> Result<Self> {
        let spec = m.mixture_spec()?;
        let pools = spec
            .groups
            .iter()
            .map(|g| {
                g.datasets
                    .iter()
                    .map(|e| {
                        let di = m.datasets.iter().position(|d| d.id == e.id).expect("spec built from manifest");
                        Pool { dataset: di, task: m.datasets[di].task, records: (0..m.datasets[di].records.len()).collect() }
                    })
                    .collect()
            })
            .collect();
        Ok(Self { mixture: Mixture::new(spec)?, pools })
    }

    pub fn for_stage(stage: Stage, m: &Manifest) -> Result<Self> {
        match stage {
            Stage::Pretrain => Self::pretrain(m),
            Stage::Multitask => Self::multitask(m),
        }
    }

    /// Builds the example for one drawn slot.
    pub fn example(
        &self,
        m: &Manifest,
        ctx: &TaskContext,
        a: Assignment,
        negative_rate: f64,
        rng: &mut impl Rng,
    ) -> Result<TaskExample> {
        let pool = &self.pools[a.group][a.dataset];
        if pool.records.is_empty() {
            return Err(Error::Config(format!("dataset {} has no records", m.datasets[pool.dataset].id)));
        }
        let d = &m.datasets[pool.dataset];
        let rec = &d.records[pool.records[rng.random_range(0..pool.records.len())]];
        if pool.task == TaskId::ObjectLocalization && negative_rate > 0.0 && rng.random::<f64>() < negative_rate {
            if let Some(ex) = build_negative_localization(ctx, rec, &d.classes, rng)? {
                return Ok(ex);
            }
        }
        build_example(ctx, pool.task, rec, rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tokens: usize,
    /// Slots drawn per mixture group this step.
    pub groups: BTreeMap<String, usize>,
    /// Cumulative per-group counts, present on audit steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<BTreeMap<String, usize>>,
}

#[derive(Debug, Clone, Default)]
pub struct StageReport {
    pub logs: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
}

impl StageReport {
    /// Mean loss over the first and last `window` logged steps.
    pub fn loss_ends(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.logs.len();
        if n == 0 {
            return None;
        }
        let w = window.clamp(1, n);
        let mean = |s: &[StepLog]| s.iter().map(|l| l.loss).sum::<f64>() / s.len() as f64;
        Some((mean(&self.logs[..w]), mean(&self.logs[n - w..])))
    }
}

pub const STATE_FILE: &str = "state.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Model weights, optimizer state and the completed step count in one file.
pub fn save_train_state(path: impl AsRef<Path>, model: &Model, opt: &Adafactor) -> Result<()> {
    let mut c = model.to_checkpoint();
    c.header["train"] = serde_json::json!({ "step": opt.steps(), "optimizer": opt.cfg });
    opt.save_into(&mut c, &model.params);
    c.save(path)
}

pub fn load_train_state(path: impl AsRef<Path>) -> Result<(Model, Adafactor)> {
    let c = Checkpoint::load(path)?;
    let model = Model::from_checkpoint(&c)?;
    let cfg: AdafactorConfig = serde_json::from_value(c.header["train"]["optimizer"].clone())
        .map_err(|e| Error::Format { offset: 0, message: format!("checkpoint has no optimizer state: {e}") })?;
    let mut opt = Adafactor::new(cfg, &model.params);
    opt.load_from(&c, &model.params)?;
    Ok((model, opt))
}

/// Configured group rate against the empirical share of `counts`.
pub fn audit_table(mix: &Mixture, counts: &BTreeMap<String, usize>) -> String {
    let total = counts.values().sum::<usize>().max(1) as f64;
    let mut s = format!("{:<24} {:>8} {:>8} {:>8}", "group", "rate", "share", "draws");
    for g in &mix.spec().groups {
        let n = counts.get(&g.id).copied().unwrap_or(0);
        s.push_str(&format!("\n{:<24} {:>8.4} {:>8.4} {:>8}", g.id, g.rate, n as f64 / total, n));
    }
    s
}

/// Trains until `opt.steps() == cfg.steps`. Every draw is keyed by
/// `(seed, step, slot)`, so a run resumed from a saved state continues
/// exactly as the uninterrupted run would. With `out`, metrics are appended to
/// `metrics.jsonl` and the state is written every `checkpoint_every` steps and
/// at the end (also when no steps remain).
pub fn run_stage(
    model: &mut Model,
    opt: &mut Adafactor,
    manifest: &Manifest,
    data: &StageData,
    ctx: &TaskContext,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<StageReport> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut report = StageReport::default();
    let mut log_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::OpenOptions::new().create(true).append(true).open(dir.join(METRICS_FILE))?)
        }
        None => None,
    };
    let save = |model: &Model, opt: &Adafactor, report: &mut StageReport| -> Result<()> {
        if let Some(dir) = out {
            let p = dir.join(STATE_FILE);
            save_train_state(&p, model, opt)?;
            report.checkpoints.push(p);
        }
        Ok(())
    };
    if opt.steps() >= cfg.steps {
        save(model, opt, &mut report)?;
        return Ok(report);
    }
    let ex_seed = derive_seed(cfg.seed, "example");
    let patch_seed = derive_seed(cfg.seed, "patches");
    let mut audit: BTreeMap<String, usize> = BTreeMap::new();
    while opt.steps() < cfg.steps {
        let k = opt.steps() + 1;
        let draws = data.mixture.sample_batch(cfg.batch_size, cfg.seed, k);
        let batch = par::map_range(cfg.batch_size, |i| -> Result<(EncoderInput, Vec<usize>)> {
            let ex = data.example(manifest, ctx, draws[i], cfg.negative_rate, &mut keyed_rng(ex_seed, k, i as u64))?;
            let inp = example_input(&ex, model.cfg.patch_size, cfg.keep_patches, &mut keyed_rng(patch_seed, k, i as u64))?;
            Ok((inp, with_eos(&ex.target_ids)))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let (loss_sum, tokens, mut grads) = batch_grads(model, &batch)?;
        if tokens == 0 {
            return Err(Error::Task("batch has no scored target positions".into()));
        }
        grads.scale(1.0 / tokens as f64);
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm)?;
        let lr = opt.cfg.schedule.lr(k);
        opt.step(&mut model.params, &grads)?;
        let mut groups = BTreeMap::new();
        for a in &draws {
            let g = data.mixture.assignment_names(*a).0.to_string();
            *groups.entry(g.clone()).or_insert(0) += 1;
            *audit.entry(g).or_insert(0) += 1;
        }
        let entry = StepLog {
            step: k,
            loss: loss_sum / tokens as f64,
            lr,
            grad_norm,
            tokens,
            groups,
            audit: (cfg.audit_every > 0 && k % cfg.audit_every == 0).then(|| audit.clone()),
        };
        if !entry.loss.is_finite() {
            return Err(Error::Diverged(format!("loss {} at step {k}", entry.loss)));
        }
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry)?)?;
        }
        log::debug!("step {k} loss {:.4} lr {lr:.2e} |g| {grad_norm:.3}", entry.loss);
        if let Some(counts) = &entry.audit {
            log::info!("mixture audit at step {k}:\n{}", audit_table(&data.mixture, counts));
        }
        report.logs.push(entry);
        if cfg.checkpoint_every > 0 && k % cfg.checkpoint_every == 0 && k < cfg.steps {
            save(model, opt, &mut report)?;
        }
    }
    save(model, opt, &mut report)?;
    Ok(report)
}
