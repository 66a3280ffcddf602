//! Vector-quantized autoencoder mapping rasters to grids of codebook indices.
//!
//! Encoder and decoder act on non-overlapping `f x f` patches (a convolution
//! with kernel = stride = `f`), so each code describes exactly one patch:
//!
//! ```text
//! patch (3 f^2) -> hidden -> relu -> hidden -> relu -> latent
//! latent -> hidden -> relu -> hidden -> relu -> 3 f^2 -> sigmoid
//! ```
//!
//! Training minimises `mse(x, x^) + |sg(z) - e|^2 + beta |z - sg(e)|^2` with the
//! straight-through estimator across the quantizer.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Grads, ParamId, ParamStore, Tape, Tensor, Var};
use crate::par;
use crate::raster::RasterImage;
use crate::trainer::optim::{Adam, Optimizer};

pub const CHECKPOINT_KIND: &str = "vq";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqConfig {
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub downsample: usize,
    pub hidden: usize,
    pub beta: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self::preset("toy").expect("known preset")
    }
}

impl VqConfig {
    /// `toy` (f=8, 512 codes), `paper` (f=16, 16384 codes, shape tests only),
    /// `micro` (gradient checks).
    pub fn preset(name: &str) -> Result<Self> {
        let (codebook_size, latent_dim, downsample, hidden) = match name {
            "toy" => (512, 64, 8, 256),
            "paper" => (16384, 256, 16, 1024),
            "micro" => (4, 3, 2, 5),
            other => return Err(Error::Config(format!("unknown VQ preset {other:?}"))),
        };
        Ok(Self { codebook_size, latent_dim, downsample, hidden, beta: 0.25 })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.downsample.is_power_of_two() {
            return Err(Error::Config(format!("downsample factor {} is not a power of two", self.downsample)));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook needs at least 2 entries".into()));
        }
        if self.latent_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("latent and hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.downsample * self.downsample
    }
}

/// `(H/f) x (W/f)` codebook indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeGrid {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<usize>,
}

/// Nearest codebook row for every latent row by direct squared distance;
/// ties go to the lowest index. Returns the indices and the quantized rows.
pub fn quantize_latents(latents: &Tensor, codebook: &Tensor) -> Result<(Vec<usize>, Tensor)> {
    if codebook.rows() == 0 {
        return Err(Error::Shape("empty codebook".into()));
    }
    if latents.cols() != codebook.cols() {
        return Err(Error::Shape(format!("latent width {} vs codebook width {}", latents.cols(), codebook.cols())));
    }
    let ids = par::map_range(latents.rows(), |i| nearest(latents.row(i), codebook));
    let mut q = Tensor::zeros(latents.rows(), latents.cols());
    for (i, &k) in ids.iter().enumerate() {
        q.row_mut(i).copy_from_slice(codebook.row(k));
    }
    Ok((ids, q))
}

fn nearest(z: &[f64], codebook: &Tensor) -> usize {
    let mut best = (f64::INFINITY, 0);
    for k in 0..codebook.rows() {
        let d: f64 = z.iter().zip(codebook.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

/// Flattens an RGB raster into `f x f` patches, row-major over the grid.
pub fn image_to_patches(r: &RasterImage, f: usize) -> Result<(Tensor, usize, usize)> {
    if r.height() % f != 0 || r.width() % f != 0 {
        return Err(Error::Shape(format!(
            "image {}x{} is not divisible by the downsample factor {f}; resize to a multiple of {f} first",
            r.height(),
            r.width()
        )));
    }
    let r = if r.channels() == 3 { r.clone() } else { r.to_rgb() };
    let (gh, gw) = (r.height() / f, r.width() / f);
    let mut t = Tensor::zeros(gh * gw, 3 * f * f);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = t.row_mut(gy * gw + gx);
            for dy in 0..f {
                for dx in 0..f {
                    let p = r.pixel(gy * f + dy, gx * f + dx);
                    row[(dy * f + dx) * 3..(dy * f + dx) * 3 + 3].copy_from_slice(p);
                }
            }
        }
    }
    Ok((t, gh, gw))
}

pub fn patches_to_image(t: &Tensor, gh: usize, gw: usize, f: usize) -> Result<RasterImage> {
    if t.rows() != gh * gw || t.cols() != 3 * f * f {
        return Err(Error::Shape(format!("patch tensor {:?} does not match a {gh}x{gw} grid of {f}x{f}", t.shape())));
    }
    let (h, w) = (gh * f, gw * f);
    let mut data = vec![0.0; h * w * 3];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = t.row(gy * gw + gx);
            for dy in 0..f {
                for dx in 0..f {
                    let o = ((gy * f + dy) * w + gx * f + dx) * 3;
                    data[o..o + 3].copy_from_slice(&row[(dy * f + dx) * 3..(dy * f + dx) * 3 + 3]);
                }
            }
        }
    }
    RasterImage::from_clipped(h, w, 3, data)
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = p.add_normal(&format!("{name}.w"), fan_in, fan_out, (2.0 / fan_in as f64).sqrt(), rng);
        let b = p.add(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Self { w, b }
    }

    fn apply(&self, t: &mut Tape, x: Var) -> Var {
        let (w, b) = (t.param(self.w), t.param(self.b));
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct VqModel {
    pub cfg: VqConfig,
    pub params: ParamStore,
    enc: [Linear; 3],
    dec: [Linear; 3],
    codebook: ParamId,
}

/// Losses of one forward pass, each averaged per element.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VqLosses {
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
}

impl VqLosses {
    pub fn total(&self, beta: f64) -> f64 {
        self.recon + self.codebook + beta * self.commit
    }
}

impl VqModel {
    pub fn new(cfg: VqConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (pd, h, l) = (cfg.patch_dim(), cfg.hidden, cfg.latent_dim);
        let enc = [
            Linear::new(&mut p, "enc.0", pd, h, &mut rng),
            Linear::new(&mut p, "enc.1", h, h, &mut rng),
            Linear::new(&mut p, "enc.2", h, l, &mut rng),
        ];
        let dec = [
            Linear::new(&mut p, "dec.0", l, h, &mut rng),
            Linear::new(&mut p, "dec.1", h, h, &mut rng),
            Linear::new(&mut p, "dec.2", h, pd, &mut rng),
        ];
        let codebook = p.add_normal("codebook", cfg.codebook_size, l, 1.0, &mut rng);
        Ok(Self { cfg, params: p, enc, dec, codebook })
    }

    pub fn codebook(&self) -> &Tensor {
        self.params.get(self.codebook)
    }

    pub fn encoder_var(&self, t: &mut Tape, x: Var) -> Var {
        let mut h = x;
        for (i, l) in self.enc.iter().enumerate() {
            h = l.apply(t, h);
            if i < 2 {
                h = t.relu(h);
            }
        }
        h
    }

    pub fn decoder_var(&self, t: &mut Tape, q: Var) -> Var {
        let mut h = q;
        for (i, l) in self.dec.iter().enumerate() {
            h = l.apply(t, h);
            if i < 2 {
                h = t.relu(h);
            }
        }
        t.sigmoid(h)
    }

    pub fn latents(&self, patches: &Tensor) -> Tensor {
        let mut t = Tape::new(&self.params);
        let x = t.input(patches.clone());
        let z = self.encoder_var(&mut t, x);
        t.value(z).clone()
    }

    pub fn encode_image(&self, r: &RasterImage) -> Result<CodeGrid> {
        let (patches, rows, cols) = image_to_patches(r, self.cfg.downsample)?;
        let (codes, _) = quantize_latents(&self.latents(&patches), self.codebook())?;
        Ok(CodeGrid { rows, cols, codes })
    }

    pub fn decode_codes(&self, g: &CodeGrid) -> Result<RasterImage> {
        if g.codes.len() != g.rows * g.cols {
            return Err(Error::Shape(format!("code grid {}x{} holds {} codes", g.rows, g.cols, g.codes.len())));
        }
        if let Some(&c) = g.codes.iter().find(|&&c| c >= self.cfg.codebook_size) {
            return Err(Error::Codec(format!("code {c} outside codebook of {}", self.cfg.codebook_size)));
        }
        let mut t = Tape::new(&self.params);
        let cb = t.param(self.codebook);
        let q = t.gather(cb, &g.codes);
        let y = self.decoder_var(&mut t, q);
        patches_to_image(t.value(y), g.rows, g.cols, self.cfg.downsample)
    }

    pub fn reconstruct(&self, r: &RasterImage) -> Result<RasterImage> {
        self.decode_codes(&self.encode_image(r)?)
    }

    /// Forward and backward on a block of patches.
    fn loss_and_grads(&self, patches: &Tensor) -> Result<(VqLosses, Vec<usize>, Grads)> {
        let mut t = Tape::new(&self.params);
        let x = t.input(patches.clone());
        let z = self.encoder_var(&mut t, x);
        let (ids, qv) = quantize_latents(t.value(z), self.codebook())?;
        let n_lat = (qv.len()).max(1) as f64;
        let n_pix = patches.len().max(1) as f64;

        let cb = t.param(self.codebook);
        let e = t.gather(cb, &ids);
        let z_const = t.input(t.value(z).clone());
        let cb_loss = t.sq_err(e, z_const);
        let e_const = t.input(qv.clone());
        let commit = t.sq_err(z, e_const);
        let q = t.straight_through(z, qv);
        let y = self.decoder_var(&mut t, q);
        let recon = t.sq_err(y, x);

        let losses = VqLosses {
            recon: t.value(recon).item() / n_pix,
            codebook: t.value(cb_loss).item() / n_lat,
            commit: t.value(commit).item() / n_lat,
        };
        let r = t.scale(recon, 1.0 / n_pix);
        let c = t.scale(cb_loss, 1.0 / n_lat);
        let m = t.scale(commit, self.cfg.beta / n_lat);
        let rc = t.add(r, c);
        let total = t.add(rc, m);
        Ok((losses, ids, t.backward(total)))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(CHECKPOINT_KIND, serde_json::to_value(self.cfg).expect("config serializes"));
        for (_, name, t) in self.params.iter() {
            c.push(name, t.clone());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let cfg: VqConfig = serde_json::from_value(c.header.clone())?;
        let mut m = Self::new(cfg, 0)?;
        let names: Vec<String> = m.params.iter().map(|(_, n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let src = c.get(name)?;
            let dst = &mut m.params.tensors_mut()[i];
            if src.shape() != dst.shape() {
                return Err(Error::Shape(format!("{name}: checkpoint {:?} vs config {:?}", src.shape(), dst.shape())));
            }
            *dst = src.clone();
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// One line per code: index followed by its vector.
    pub fn codebook_text(&self) -> String {
        let mut s = String::new();
        for k in 0..self.cfg.codebook_size {
            let _ = write!(s, "{k}");
            for v in self.codebook().row(k) {
                let _ = write!(s, " {v:.6}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqTrainOptions {
    pub steps: usize,
    pub batch_images: usize,
    pub lr: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub reseed_every: usize,
    /// Images per independent forward/backward block; fixed so results do
    /// not depend on the number of worker threads.
    pub chunk_images: usize,
}

impl Default for VqTrainOptions {
    fn default() -> Self {
        Self { steps: 2000, batch_images: 8, lr: 1e-3, seed: 0, eval_every: 250, reseed_every: 500, chunk_images: 2 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VqReport {
    /// `(step, held-out reconstruction MSE)`.
    pub evals: Vec<(usize, f64)>,
    pub last_losses: VqLosses,
    pub reseeded: usize,
    /// Fraction of codes used on the held-out set at the end.
    pub usage: f64,
}

pub fn heldout_mse(m: &VqModel, images: &[RasterImage]) -> Result<f64> {
    let errs = par::map(images, |r| m.reconstruct(r).and_then(|y| y.mse(&r.to_rgb())));
    let mut s = 0.0;
    for e in errs {
        s += e?;
    }
    Ok(s / images.len().max(1) as f64)
}

pub fn code_usage(m: &VqModel, images: &[RasterImage]) -> Result<Vec<usize>> {
    let mut hist = vec![0; m.cfg.codebook_size];
    for g in par::map(images, |r| m.encode_image(r)) {
        for c in g?.codes {
            hist[c] += 1;
        }
    }
    Ok(hist)
}

fn batch_patches(images: &[&RasterImage], f: usize) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut cols = 0;
    for r in images {
        let (t, _, _) = image_to_patches(r, f)?;
        cols = t.cols();
        rows.extend(t.into_vec());
    }
    Ok(Tensor::from_vec(rows.len() / cols.max(1), cols, rows))
}

/// Trains with Adam. The codebook starts from encoder outputs of the first
/// batch; codes unused since the previous reseed are moved onto random
/// latents of the current batch every `reseed_every` steps.
pub fn train_vq(
    train: &[RasterImage],
    heldout: &[RasterImage],
    cfg: VqConfig,
    opts: VqTrainOptions,
) -> Result<(VqModel, VqReport)> {
    if train.is_empty() {
        return Err(Error::Config("VQ training set is empty".into()));
    }
    let mut m = VqModel::new(cfg, opts.seed)?;
    let mut opt = Adam::new(opts.lr, &m.params);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut usage = vec![0usize; cfg.codebook_size];
    let mut report = VqReport::default();
    let f = cfg.downsample;

    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_images);
        for _ in 0..opts.batch_images {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let all = batch_patches(&batch, f)?;
        if step == 0 {
            let z = m.latents(&all);
            let cb = m.params.get_mut(m.codebook);
            for k in 0..cfg.codebook_size {
                let src = rng.random_range(0..z.rows());
                for (d, s) in cb.row_mut(k).iter_mut().zip(z.row(src)) {
                    *d = s + 1e-3 * (rng.random::<f64>() - 0.5);
                }
            }
        }
        let chunks: Vec<Tensor> =
            batch.chunks(opts.chunk_images.max(1)).map(|c| batch_patches(c, f)).collect::<Result<_>>()?;
        let results = par::map(&chunks, |c| m.loss_and_grads(c));
        let mut grads = Grads::empty(m.params.len());
        let mut losses = VqLosses::default();
        let nchunks = chunks.len() as f64;
        for r in results {
            let (l, ids, g) = r?;
            for i in ids {
                usage[i] += 1;
            }
            losses.recon += l.recon / nchunks;
            losses.codebook += l.codebook / nchunks;
            losses.commit += l.commit / nchunks;
            grads.merge(g);
        }
        grads.scale(1.0 / nchunks);
        if !losses.total(cfg.beta).is_finite() {
            return Err(Error::Diverged(format!("VQ loss not finite at step {step}: {losses:?}")));
        }
        report.last_losses = losses;
        opt.step(&mut m.params, &grads)?;

        let done = step + 1;
        if opts.reseed_every > 0 && done % opts.reseed_every == 0 {
            let z = m.latents(&all);
            let cb = m.params.get_mut(m.codebook);
            for (k, u) in usage.iter_mut().enumerate() {
                if *u == 0 {
                    let src = rng.random_range(0..z.rows());
                    cb.row_mut(k).copy_from_slice(z.row(src));
                    report.reseeded += 1;
                }
                *u = 0;
            }
        }
        if !heldout.is_empty() && opts.eval_every > 0 && (done % opts.eval_every == 0 || done == opts.steps) {
            let mse = heldout_mse(&m, heldout)?;
            log::info!("vq step {done}: held-out mse {mse:.5}, train {losses:?}");
            report.evals.push((done, mse));
        }
    }
    if !heldout.is_empty() {
        let hist = code_usage(&m, heldout)?;
        report.usage = hist.iter().filter(|&&c| c > 0).count() as f64 / cfg.codebook_size as f64;
    }
    Ok((m, report))
}
