//! Encoder-decoder transformer over the unified vocabulary.
//!
//! The encoder reads text embeddings followed by projected image patches; the
//! decoder predicts tokens from the whole vocabulary. Layers are pre-norm
//! (scale-only RMS norm) with gated-GELU feed-forward blocks and no biases.
//! Attention carries learned relative-position biases: 1-D buckets between
//! text tokens, summed row and column buckets between patches, and one
//! learned value for each text/patch direction. Token embeddings are shared
//! between the input and the output projection.

pub mod patch;
pub mod relpos;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use patch::{patchify, subsample_patches, unpatchify, PatchSeq};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, Tape, Tensor, Var, IGNORE, NO_BUCKET};
use crate::vocab::{VocabLayout, EOS_ID, PAD_ID};

pub const CHECKPOINT_KIND: &str = "model";
/// First decoder input.
pub const START_ID: usize = PAD_ID;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub patch_size: usize,
    pub max_text_in: usize,
    pub max_text_out: usize,
    pub max_image_in_patches: usize,
    pub max_image_out_tokens: usize,
    /// Largest patch-grid side.
    pub max_grid: usize,
    pub rel_buckets_1d: usize,
    pub rel_buckets_2d: usize,
    pub rel_max_distance_1d: usize,
    pub rel_max_distance_2d: usize,
}

pub const PRESETS: [&str; 5] = ["small", "base", "large", "xl", "micro"];

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (enc, dec, dim, mlp, heads, head_dim, patch) = match name {
            "small" => (8, 8, 512, 1024, 6, 64, 16),
            "base" => (12, 12, 768, 2048, 12, 64, 16),
            "large" => (24, 24, 1024, 2816, 16, 64, 16),
            "xl" => (24, 24, 2048, 5120, 32, 64, 16),
            "micro" => (2, 2, 32, 64, 4, 8, 8),
            other => {
                return Err(Error::Config(format!("unknown model preset {other:?} (expected one of {PRESETS:?})")))
            }
        };
        Ok(Self {
            encoder_layers: enc,
            decoder_layers: dec,
            model_dim: dim,
            mlp_dim: mlp,
            heads,
            head_dim,
            patch_size: patch,
            max_text_in: 256,
            max_text_out: 128,
            max_image_in_patches: 576,
            max_image_out_tokens: 256,
            max_grid: 24,
            rel_buckets_1d: 32,
            rel_buckets_2d: 16,
            rel_max_distance_1d: 128,
            rel_max_distance_2d: 24,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("model_dim", self.model_dim),
            ("mlp_dim", self.mlp_dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("patch_size", self.patch_size),
            ("max_grid", self.max_grid),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model config field {name} must be positive")));
        }
        if self.rel_buckets_1d < 4 || self.rel_buckets_1d % 2 != 0 || self.rel_buckets_2d < 4 || self.rel_buckets_2d % 2 != 0 {
            return Err(Error::Config("relative-bias bucket counts must be even and at least 4".into()));
        }
        Ok(())
    }

    /// Longest decoder input: the larger output cap plus EOS.
    pub fn max_decoder_len(&self) -> usize {
        self.max_text_out.max(self.max_image_out_tokens) + 1
    }

    fn attn_width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Encoder bias table rows: 1-D buckets, row buckets, column buckets,
    /// then text-to-patch and patch-to-text.
    pub fn encoder_bias_rows(&self) -> usize {
        self.rel_buckets_1d + 2 * self.rel_buckets_2d + 2
    }

    /// Every parameter as `(name, rows, cols)`, in allocation order.
    pub fn param_shapes(&self, layout: &VocabLayout) -> Vec<(String, usize, usize)> {
        let (d, a, m) = (self.model_dim, self.attn_width(), self.mlp_dim);
        let mut v: Vec<(String, usize, usize)> = Vec::new();
        let mut push = |n: String, r: usize, c: usize| v.push((n, r, c));
        push("tok_emb".into(), layout.total(), d);
        push("patch_proj.w".into(), 3 * self.patch_size * self.patch_size, d);
        push("patch_proj.b".into(), 1, d);
        push("mask_emb".into(), 1, d);
        push("enc.text_pos".into(), self.max_text_in, d);
        push("enc.patch_row".into(), self.max_grid, d);
        push("enc.patch_col".into(), self.max_grid, d);
        push("enc.rel".into(), self.encoder_bias_rows(), self.heads);
        let attn = |push: &mut dyn FnMut(String, usize, usize), p: &str| {
            push(format!("{p}.q"), d, a);
            push(format!("{p}.k"), d, a);
            push(format!("{p}.v"), d, a);
            push(format!("{p}.o"), a, d);
        };
        let mlp = |push: &mut dyn FnMut(String, usize, usize), p: &str| {
            push(format!("{p}.wi0"), d, m);
            push(format!("{p}.wi1"), d, m);
            push(format!("{p}.wo"), m, d);
        };
        for l in 0..self.encoder_layers {
            push(format!("enc.{l}.ln_attn"), 1, d);
            attn(&mut push, &format!("enc.{l}.attn"));
            push(format!("enc.{l}.ln_mlp"), 1, d);
            mlp(&mut push, &format!("enc.{l}.mlp"));
        }
        push("enc.ln_final".into(), 1, d);
        push("dec.pos".into(), self.max_decoder_len(), d);
        push("dec.rel".into(), self.rel_buckets_1d, self.heads);
        for l in 0..self.decoder_layers {
            push(format!("dec.{l}.ln_self"), 1, d);
            attn(&mut push, &format!("dec.{l}.self"));
            push(format!("dec.{l}.ln_cross"), 1, d);
            attn(&mut push, &format!("dec.{l}.cross"));
            push(format!("dec.{l}.ln_mlp"), 1, d);
            mlp(&mut push, &format!("dec.{l}.mlp"));
        }
        push("dec.ln_final".into(), 1, d);
        v
    }

    /// Parameter count without allocating weights.
    pub fn param_count(&self, layout: &VocabLayout) -> usize {
        self.param_shapes(layout).iter().map(|(_, r, c)| r * c).sum()
    }
}

/// Encoder input: text ids followed by an optional patch sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub text: Vec<usize>,
    pub image: Option<PatchSeq>,
}

impl EncoderInput {
    pub fn text(ids: Vec<usize>) -> Self {
        Self { text: ids, image: None }
    }

    pub fn len(&self) -> usize {
        self.text.len() + self.image.as_ref().map_or(0, |p| p.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct MlpIds {
    wi0: ParamId,
    wi1: ParamId,
    wo: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct EncLayer {
    ln_attn: ParamId,
    attn: AttnIds,
    ln_mlp: ParamId,
    mlp: MlpIds,
}

#[derive(Debug, Clone, Copy)]
struct DecLayer {
    ln_self: ParamId,
    self_attn: AttnIds,
    ln_cross: ParamId,
    cross: AttnIds,
    ln_mlp: ParamId,
    mlp: MlpIds,
}

#[derive(Debug, Clone)]
struct Ids {
    tok_emb: ParamId,
    patch_w: ParamId,
    patch_b: ParamId,
    mask_emb: ParamId,
    text_pos: ParamId,
    patch_row: ParamId,
    patch_col: ParamId,
    enc_rel: ParamId,
    enc: Vec<EncLayer>,
    enc_ln: ParamId,
    dec_pos: ParamId,
    dec_rel: ParamId,
    dec: Vec<DecLayer>,
    dec_ln: ParamId,
}

impl Ids {
    fn resolve(cfg: &ModelConfig, p: &ParamStore) -> Self {
        let id = |n: &str| p.id(n).unwrap_or_else(|| panic!("missing parameter {n}"));
        let attn = |pre: &str| AttnIds {
            q: id(&format!("{pre}.q")),
            k: id(&format!("{pre}.k")),
            v: id(&format!("{pre}.v")),
            o: id(&format!("{pre}.o")),
        };
        let mlp = |pre: &str| MlpIds {
            wi0: id(&format!("{pre}.wi0")),
            wi1: id(&format!("{pre}.wi1")),
            wo: id(&format!("{pre}.wo")),
        };
        Self {
            tok_emb: id("tok_emb"),
            patch_w: id("patch_proj.w"),
            patch_b: id("patch_proj.b"),
            mask_emb: id("mask_emb"),
            text_pos: id("enc.text_pos"),
            patch_row: id("enc.patch_row"),
            patch_col: id("enc.patch_col"),
            enc_rel: id("enc.rel"),
            enc: (0..cfg.encoder_layers)
                .map(|l| EncLayer {
                    ln_attn: id(&format!("enc.{l}.ln_attn")),
                    attn: attn(&format!("enc.{l}.attn")),
                    ln_mlp: id(&format!("enc.{l}.ln_mlp")),
                    mlp: mlp(&format!("enc.{l}.mlp")),
                })
                .collect(),
            enc_ln: id("enc.ln_final"),
            dec_pos: id("dec.pos"),
            dec_rel: id("dec.rel"),
            dec: (0..cfg.decoder_layers)
                .map(|l| DecLayer {
                    ln_self: id(&format!("dec.{l}.ln_self")),
                    self_attn: attn(&format!("dec.{l}.self")),
                    ln_cross: id(&format!("dec.{l}.ln_cross")),
                    cross: attn(&format!("dec.{l}.cross")),
                    ln_mlp: id(&format!("dec.{l}.ln_mlp")),
                    mlp: mlp(&format!("dec.{l}.mlp")),
                })
                .collect(),
            dec_ln: id("dec.ln_final"),
        }
    }
}

fn init_std(name: &str, rows: usize) -> Option<f64> {
    if name.contains(".ln") {
        None
    } else if name == "tok_emb" {
        Some(1.0)
    } else if name.ends_with("pos") || name.contains("patch_row") || name.contains("patch_col") || name == "mask_emb" {
        Some(0.5)
    } else if name.ends_with(".rel") {
        Some(0.1)
    } else if name == "patch_proj.b" {
        Some(0.0)
    } else {
        Some(1.0 / (rows as f64).sqrt())
    }
}

/// Incremental decoding state: cached self-attention keys/values per layer
/// and the encoder-side cross-attention keys/values.
#[derive(Debug, Clone)]
pub struct DecodeState {
    cross_k: Vec<Tensor>,
    cross_v: Vec<Tensor>,
    self_k: Vec<Option<Tensor>>,
    self_v: Vec<Option<Tensor>>,
    pos: usize,
}

impl DecodeState {
    /// Number of tokens consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

fn append_rows(cache: &Option<Tensor>, new: &Tensor) -> Tensor {
    match cache {
        None => new.clone(),
        Some(c) => {
            let mut data = c.data().to_vec();
            data.extend_from_slice(new.data());
            Tensor::from_vec(c.rows() + new.rows(), c.cols(), data)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub layout: VocabLayout,
    pub params: ParamStore,
    ids: Ids,
}

impl Model {
    pub fn new(cfg: ModelConfig, layout: VocabLayout, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, r, c) in cfg.param_shapes(&layout) {
            match init_std(&name, r) {
                None => params.add(name, Tensor::filled(r, c, 1.0)),
                Some(s) if s == 0.0 => params.add(name, Tensor::zeros(r, c)),
                Some(s) => params.add_normal(&name, r, c, s, &mut rng),
            };
        }
        let ids = Ids::resolve(&cfg, &params);
        Ok(Self { cfg, layout, params, ids })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn check_input(&self, inp: &EncoderInput) -> Result<()> {
        if inp.is_empty() {
            return Err(Error::Shape("encoder input is empty".into()));
        }
        if inp.text.len() > self.cfg.max_text_in {
            return Err(Error::Truncation { what: "encoder text".into(), len: inp.text.len(), cap: self.cfg.max_text_in });
        }
        if let Some(&id) = inp.text.iter().find(|&&id| id >= self.layout.total()) {
            return Err(Error::IdOutOfRange { id, total: self.layout.total() });
        }
        if let Some(p) = &inp.image {
            if p.len() > self.cfg.max_image_in_patches {
                return Err(Error::Truncation { what: "image patches".into(), len: p.len(), cap: self.cfg.max_image_in_patches });
            }
            if p.patch_size != self.cfg.patch_size {
                return Err(Error::Shape(format!("patch size {} vs model {}", p.patch_size, self.cfg.patch_size)));
            }
            if p.positions.iter().any(|&(r, c)| r >= self.cfg.max_grid || c >= self.cfg.max_grid) {
                return Err(Error::Shape(format!("patch grid exceeds {} per side", self.cfg.max_grid)));
            }
        }
        Ok(())
    }

    fn check_decoder(&self, ids: &[usize]) -> Result<()> {
        if ids.len() > self.cfg.max_decoder_len() {
            return Err(Error::Truncation { what: "decoder sequence".into(), len: ids.len(), cap: self.cfg.max_decoder_len() });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.layout.total()) {
            return Err(Error::IdOutOfRange { id, total: self.layout.total() });
        }
        Ok(())
    }

    /// Bucket pairs for every (query, key) encoder position, row-major.
    pub fn encoder_bias_index(&self, inp: &EncoderInput) -> Vec<(u32, u32)> {
        let c = &self.cfg;
        let nt = inp.text.len();
        let pos: Vec<Option<(usize, usize)>> = (0..nt)
            .map(|_| None)
            .chain(inp.image.iter().flat_map(|p| p.positions.iter().map(|&x| Some(x))))
            .collect();
        let (row0, col0) = (c.rel_buckets_1d, c.rel_buckets_1d + c.rel_buckets_2d);
        let (t2i, i2t) = (col0 + c.rel_buckets_2d, col0 + c.rel_buckets_2d + 1);
        let mut idx = Vec::with_capacity(pos.len() * pos.len());
        for (qi, q) in pos.iter().enumerate() {
            for (ki, k) in pos.iter().enumerate() {
                let pair = match (q, k) {
                    (None, None) => {
                        (relpos::bucket(ki as i64 - qi as i64, true, c.rel_buckets_1d, c.rel_max_distance_1d), NO_BUCKET as usize)
                    }
                    (Some((qr, qc)), Some((kr, kc))) => (
                        row0 + relpos::bucket(*kr as i64 - *qr as i64, true, c.rel_buckets_2d, c.rel_max_distance_2d),
                        col0 + relpos::bucket(*kc as i64 - *qc as i64, true, c.rel_buckets_2d, c.rel_max_distance_2d),
                    ),
                    (None, Some(_)) => (t2i, NO_BUCKET as usize),
                    (Some(_), None) => (i2t, NO_BUCKET as usize),
                };
                idx.push((pair.0 as u32, pair.1 as u32));
            }
        }
        idx
    }

    fn decoder_bias_index(&self, queries: std::ops::Range<usize>, keys: usize) -> Vec<(u32, u32)> {
        let c = &self.cfg;
        let mut idx = Vec::with_capacity(queries.len() * keys);
        for q in queries {
            for k in 0..keys {
                let b = relpos::bucket(k as i64 - q as i64, false, c.rel_buckets_1d, c.rel_max_distance_1d);
                idx.push((b as u32, NO_BUCKET));
            }
        }
        idx
    }

    /// Encoder relative-bias matrix for one head.
    pub fn relative_bias(&self, inp: &EncoderInput, head: usize) -> Tensor {
        let n = inp.len();
        let table = self.params.get(self.ids.enc_rel);
        let data = self
            .encoder_bias_index(inp)
            .iter()
            .map(|&(a, b)| table.get(a as usize, head) + if b == NO_BUCKET { 0.0 } else { table.get(b as usize, head) })
            .collect();
        Tensor::from_vec(n, n, data)
    }

    fn attend(&self, t: &mut Tape, q: Var, k: Var, v: Var, bias: Option<(Var, &[(u32, u32)])>, causal: Option<usize>) -> Var {
        let hd = self.cfg.head_dim;
        let (n, m) = (t.shape(q).0, t.shape(k).0);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = t.slice_cols(q, h * hd, hd);
            let kh = t.slice_cols(k, h * hd, hd);
            let vh = t.slice_cols(v, h * hd, hd);
            let s = t.matmul_t(qh, false, kh, true);
            let mut s = t.scale(s, scale);
            if let Some((table, idx)) = bias {
                let b = t.pair_bias(table, idx.to_vec(), n, m, h);
                s = t.add(s, b);
            }
            let p = t.softmax(s, causal);
            outs.push(t.matmul(p, vh));
        }
        if outs.len() == 1 {
            outs[0]
        } else {
            t.concat_cols(&outs)
        }
    }

    fn attention(&self, t: &mut Tape, xq: Var, xkv: Var, w: &AttnIds, bias: Option<(Var, &[(u32, u32)])>, causal: Option<usize>) -> Var {
        let (wq, wk, wv, wo) = (t.param(w.q), t.param(w.k), t.param(w.v), t.param(w.o));
        let q = t.matmul(xq, wq);
        let k = t.matmul(xkv, wk);
        let v = t.matmul(xkv, wv);
        let o = self.attend(t, q, k, v, bias, causal);
        t.matmul(o, wo)
    }

    fn mlp(&self, t: &mut Tape, x: Var, w: &MlpIds) -> Var {
        let (wi0, wi1, wo) = (t.param(w.wi0), t.param(w.wi1), t.param(w.wo));
        let a = t.matmul(x, wi0);
        let a = t.gelu(a);
        let b = t.matmul(x, wi1);
        let h = t.mul(a, b);
        t.matmul(h, wo)
    }

    fn norm(&self, t: &mut Tape, x: Var, scale: ParamId) -> Var {
        let s = t.param(scale);
        t.rms_norm(x, s)
    }

    /// Encoder on the tape; returns the final normalized states.
    pub fn encode_var(&self, t: &mut Tape, inp: &EncoderInput) -> Result<Var> {
        self.check_input(inp)?;
        let mut parts = Vec::new();
        if !inp.text.is_empty() {
            let emb = t.param(self.ids.tok_emb);
            let e = t.gather(emb, &inp.text);
            let pos_t = t.param(self.ids.text_pos);
            let p = t.gather(pos_t, &(0..inp.text.len()).collect::<Vec<_>>());
            parts.push(t.add(e, p));
        }
        if let Some(img) = &inp.image {
            let x = t.input(img.data.clone());
            let (w, b) = (t.param(self.ids.patch_w), t.param(self.ids.patch_b));
            let y = t.matmul(x, w);
            let mut y = t.add_row(y, b);
            if img.masked.iter().any(|&m| m) {
                let me = t.param(self.ids.mask_emb);
                y = t.row_replace(y, me, &img.masked);
            }
            let (rt, ct) = (t.param(self.ids.patch_row), t.param(self.ids.patch_col));
            let rows: Vec<usize> = img.positions.iter().map(|p| p.0).collect();
            let cols: Vec<usize> = img.positions.iter().map(|p| p.1).collect();
            let r = t.gather(rt, &rows);
            let c = t.gather(ct, &cols);
            let y = t.add(y, r);
            parts.push(t.add(y, c));
        }
        let mut x = if parts.len() == 1 { parts[0] } else { t.concat_rows(&parts) };
        let idx = self.encoder_bias_index(inp);
        let rel = t.param(self.ids.enc_rel);
        for l in &self.ids.enc {
            let h = self.norm(t, x, l.ln_attn);
            let a = self.attention(t, h, h, &l.attn, Some((rel, &idx)), None);
            x = t.add(x, a);
            let h = self.norm(t, x, l.ln_mlp);
            let m = self.mlp(t, h, &l.mlp);
            x = t.add(x, m);
        }
        Ok(self.norm(t, x, self.ids.enc_ln))
    }

    /// Teacher-forced decoder; returns logits, one row per input position.
    pub fn decoder_var(&self, t: &mut Tape, enc: Var, dec_in: &[usize]) -> Result<Var> {
        self.check_decoder(dec_in)?;
        if dec_in.is_empty() {
            return Err(Error::Shape("decoder input is empty".into()));
        }
        let emb = t.param(self.ids.tok_emb);
        let e = t.gather(emb, dec_in);
        let pt = t.param(self.ids.dec_pos);
        let p = t.gather(pt, &(0..dec_in.len()).collect::<Vec<_>>());
        let mut x = t.add(e, p);
        let idx = self.decoder_bias_index(0..dec_in.len(), dec_in.len());
        let rel = t.param(self.ids.dec_rel);
        for l in &self.ids.dec {
            let h = self.norm(t, x, l.ln_self);
            let a = self.attention(t, h, h, &l.self_attn, Some((rel, &idx)), Some(0));
            x = t.add(x, a);
            let h = self.norm(t, x, l.ln_cross);
            let a = self.attention(t, h, enc, &l.cross, None, None);
            x = t.add(x, a);
            let h = self.norm(t, x, l.ln_mlp);
            let m = self.mlp(t, h, &l.mlp);
            x = t.add(x, m);
        }
        let h = self.norm(t, x, self.ids.dec_ln);
        Ok(self.logits_var(t, h))
    }

    fn logits_var(&self, t: &mut Tape, h: Var) -> Var {
        let emb = t.param(self.ids.tok_emb);
        let l = t.matmul_t(h, false, emb, true);
        t.scale(l, 1.0 / (self.cfg.model_dim as f64).sqrt())
    }

    /// Summed cross-entropy of `target` (which should end in EOS) and the
    /// number of scored positions. Positions holding [`IGNORE`] are skipped.
    pub fn loss_var(&self, t: &mut Tape, inp: &EncoderInput, target: &[usize]) -> Result<(Var, usize)> {
        let enc = self.encode_var(t, inp)?;
        let dec_in = teacher_inputs(target);
        let logits = self.decoder_var(t, enc, &dec_in)?;
        let n = target.iter().filter(|&&x| x != IGNORE).count();
        Ok((t.cross_entropy_sum(logits, target), n))
    }

    pub fn encode(&self, inp: &EncoderInput) -> Result<Tensor> {
        let mut t = Tape::new(&self.params);
        let v = self.encode_var(&mut t, inp)?;
        Ok(t.value(v).clone())
    }

    /// Full teacher-forced logits for decoder inputs `dec_in`.
    pub fn decoder_logits(&self, enc: &Tensor, dec_in: &[usize]) -> Result<Tensor> {
        let mut t = Tape::new(&self.params);
        let e = t.input(enc.clone());
        let l = self.decoder_var(&mut t, e, dec_in)?;
        Ok(t.value(l).clone())
    }

    /// Logits for the token after `[START] + prefix`.
    pub fn decode_step(&self, enc: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut dec_in = vec![START_ID];
        dec_in.extend_from_slice(prefix);
        let l = self.decoder_logits(enc, &dec_in)?;
        Ok(l.row(l.rows() - 1).to_vec())
    }

    pub fn begin_decode(&self, enc: &Tensor) -> DecodeState {
        let mut cross_k = Vec::new();
        let mut cross_v = Vec::new();
        for l in &self.ids.dec {
            cross_k.push(enc.matmul(false, self.params.get(l.cross.k), false));
            cross_v.push(enc.matmul(false, self.params.get(l.cross.v), false));
        }
        let n = self.ids.dec.len();
        DecodeState { cross_k, cross_v, self_k: vec![None; n], self_v: vec![None; n], pos: 0 }
    }

    /// Feeds one decoder input token and returns the next-token logits.
    /// The first call should feed [`START_ID`].
    pub fn step(&self, st: &mut DecodeState, token: usize) -> Result<Vec<f64>> {
        if st.pos >= self.cfg.max_decoder_len() {
            return Err(Error::Truncation { what: "decoder sequence".into(), len: st.pos + 1, cap: self.cfg.max_decoder_len() });
        }
        self.check_decoder(&[token])?;
        let pos = st.pos;
        let mut t = Tape::new(&self.params);
        let emb = t.param(self.ids.tok_emb);
        let e = t.gather(emb, &[token]);
        let pt = t.param(self.ids.dec_pos);
        let p = t.gather(pt, &[pos]);
        let mut x = t.add(e, p);
        let idx = self.decoder_bias_index(pos..pos + 1, pos + 1);
        let rel = t.param(self.ids.dec_rel);
        let mut new_kv = Vec::new();
        for (li, l) in self.ids.dec.iter().enumerate() {
            let h = self.norm(&mut t, x, l.ln_self);
            let (wq, wk, wv, wo) =
                (t.param(l.self_attn.q), t.param(l.self_attn.k), t.param(l.self_attn.v), t.param(l.self_attn.o));
            let q = t.matmul(h, wq);
            let k = t.matmul(h, wk);
            let v = t.matmul(h, wv);
            let kn = append_rows(&st.self_k[li], t.value(k));
            let vn = append_rows(&st.self_v[li], t.value(v));
            let (kk, vv) = (t.input(kn.clone()), t.input(vn.clone()));
            new_kv.push((kn, vn));
            let o = self.attend(&mut t, q, kk, vv, Some((rel, &idx)), None);
            let a = t.matmul(o, wo);
            x = t.add(x, a);
            let h = self.norm(&mut t, x, l.ln_cross);
            let (wq, wo) = (t.param(l.cross.q), t.param(l.cross.o));
            let q = t.matmul(h, wq);
            let (ck, cv) = (t.input(st.cross_k[li].clone()), t.input(st.cross_v[li].clone()));
            let o = self.attend(&mut t, q, ck, cv, None, None);
            let a = t.matmul(o, wo);
            x = t.add(x, a);
            let h = self.norm(&mut t, x, l.ln_mlp);
            let m = self.mlp(&mut t, h, &l.mlp);
            x = t.add(x, m);
        }
        let h = self.norm(&mut t, x, self.ids.dec_ln);
        let logits = self.logits_var(&mut t, h);
        let out = t.value(logits).row(0).to_vec();
        for (li, (k, v)) in new_kv.into_iter().enumerate() {
            st.self_k[li] = Some(k);
            st.self_v[li] = Some(v);
        }
        st.pos += 1;
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let header = serde_json::json!({ "config": self.cfg, "layout": self.layout });
        let mut c = Checkpoint::new(CHECKPOINT_KIND, header);
        for (_, name, t) in self.params.iter() {
            c.push(name, t.clone());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let cfg: ModelConfig = serde_json::from_value(c.header["config"].clone())?;
        let layout: VocabLayout = serde_json::from_value(c.header["layout"].clone())?;
        cfg.validate()?;
        let mut params = ParamStore::new();
        for (name, r, cols) in cfg.param_shapes(&layout) {
            let t = c.get(&name)?;
            if t.shape() != (r, cols) {
                return Err(Error::Shape(format!("{name}: checkpoint {:?}, config expects {:?}", t.shape(), (r, cols))));
            }
            params.add(name, t.clone());
        }
        let ids = Ids::resolve(&cfg, &params);
        Ok(Self { cfg, layout, params, ids })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// `[START] + target[..n-1]`.
pub fn teacher_inputs(target: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(target.len());
    v.push(START_ID);
    v.extend(target.iter().take(target.len().saturating_sub(1)).map(|&x| if x == IGNORE { PAD_ID } else { x }));
    v
}

/// Target ids followed by EOS.
pub fn with_eos(target: &[usize]) -> Vec<usize> {
    let mut v = target.to_vec();
    v.push(EOS_ID);
    v
}
