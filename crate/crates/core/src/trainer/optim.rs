//! Optimizers, learning-rate schedule and gradient clipping.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Grads, ParamStore, Tensor};

/// Constant `peak` for `hold_steps`, then `peak * sqrt(hold_steps / k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub hold_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { peak: 1e-2, hold_steps: 10_000 }
    }
}

impl LrSchedule {
    pub fn lr(&self, k: u64) -> f64 {
        let k = k.max(1);
        if k <= self.hold_steps {
            self.peak
        } else {
            self.peak * (self.hold_steps as f64 / k as f64).sqrt()
        }
    }
}

pub fn lr_schedule(k: u64) -> f64 {
    LrSchedule::default().lr(k)
}

/// `1 - k^-0.8`.
pub fn beta2(k: u64) -> f64 {
    1.0 - (k as f64).powf(-0.8)
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> Result<f64> {
    if !grads.all_finite() {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(norm)
}

pub trait Optimizer {
    /// Applies one update and advances the step counter.
    fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<()>;
    /// Number of completed steps.
    fn steps(&self) -> u64;
    fn save_into(&self, ckpt: &mut Checkpoint, params: &ParamStore);
    fn load_from(&mut self, ckpt: &Checkpoint, params: &ParamStore) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq)]
enum Second {
    Factored { row: Tensor, col: Tensor },
    Full(Tensor),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdafactorConfig {
    pub beta1: f64,
    pub eps: f64,
    pub clip_threshold: f64,
    pub schedule: LrSchedule,
}

impl Default for AdafactorConfig {
    fn default() -> Self {
        Self { beta1: 0.9, eps: 1e-30, clip_threshold: 1.0, schedule: LrSchedule::default() }
    }
}

/// Adafactor with factored second moments for matrices, `beta2 = 1 - k^-0.8`,
/// update clipping and first-moment momentum. The step size comes from the
/// external schedule; relative-step and parameter-scale options are off.
#[derive(Debug, Clone)]
pub struct Adafactor {
    pub cfg: AdafactorConfig,
    k: u64,
    second: Vec<Second>,
    momentum: Vec<Tensor>,
}

impl Adafactor {
    pub fn new(cfg: AdafactorConfig, params: &ParamStore) -> Self {
        let second = params
            .iter()
            .map(|(_, _, t)| {
                if t.rows() > 1 && t.cols() > 1 {
                    Second::Factored { row: Tensor::zeros(t.rows(), 1), col: Tensor::zeros(1, t.cols()) }
                } else {
                    Second::Full(Tensor::zeros(t.rows(), t.cols()))
                }
            })
            .collect();
        let momentum = params.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { cfg, k: 0, second, momentum }
    }
}

impl Optimizer for Adafactor {
    fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<()> {
        let k = self.k + 1;
        let b2 = beta2(k);
        let lr = self.cfg.schedule.lr(k);
        let eps = self.cfg.eps;
        let mut updates: Vec<Option<Tensor>> = Vec::with_capacity(params.len());
        for (i, g) in grads.slots().iter().enumerate() {
            let Some(g) = g else {
                updates.push(None);
                continue;
            };
            let (rows, cols) = g.shape();
            let mut u = Tensor::zeros(rows, cols);
            match &mut self.second[i] {
                Second::Factored { row, col } => {
                    for r in 0..rows {
                        let s: f64 = g.row(r).iter().map(|x| x * x + eps).sum::<f64>() / cols as f64;
                        let v = row.data()[r];
                        row.data_mut()[r] = b2 * v + (1.0 - b2) * s;
                    }
                    for c in 0..cols {
                        let s: f64 = (0..rows).map(|r| g.get(r, c) * g.get(r, c) + eps).sum::<f64>() / rows as f64;
                        let v = col.data()[c];
                        col.data_mut()[c] = b2 * v + (1.0 - b2) * s;
                    }
                    let row_mean: f64 = row.data().iter().sum::<f64>() / rows as f64;
                    for r in 0..rows {
                        for c in 0..cols {
                            let vhat = row.data()[r] * col.data()[c] / row_mean;
                            u.set(r, c, g.get(r, c) / vhat.sqrt());
                        }
                    }
                }
                Second::Full(v) => {
                    for ((vv, gg), uu) in v.data_mut().iter_mut().zip(g.data()).zip(u.data_mut()) {
                        *vv = b2 * *vv + (1.0 - b2) * (gg * gg + eps);
                        *uu = gg / vv.sqrt();
                    }
                }
            }
            let rms = (u.sum_sq() / u.len().max(1) as f64).sqrt();
            let denom = (rms / self.cfg.clip_threshold).max(1.0);
            u.scale_in_place(1.0 / denom);
            if !u.all_finite() {
                return Err(Error::Diverged(format!("non-finite Adafactor update for {}", params.name(crate::nn::ParamId(i)))));
            }
            updates.push(Some(u));
        }
        for (i, u) in updates.into_iter().enumerate() {
            let Some(u) = u else { continue };
            let m = &mut self.momentum[i];
            let b1 = self.cfg.beta1;
            for (mm, uu) in m.data_mut().iter_mut().zip(u.data()) {
                *mm = b1 * *mm + (1.0 - b1) * uu;
            }
            let p = &mut params.tensors_mut()[i];
            for (pp, mm) in p.data_mut().iter_mut().zip(m.data()) {
                *pp -= lr * mm;
            }
        }
        self.k = k;
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.k
    }

    fn save_into(&self, ckpt: &mut Checkpoint, params: &ParamStore) {
        ckpt.push("opt/step", Tensor::scalar(self.k as f64));
        for (i, name, _) in params.iter() {
            match &self.second[i.0] {
                Second::Factored { row, col } => {
                    ckpt.push(format!("opt/{name}/row"), row.clone());
                    ckpt.push(format!("opt/{name}/col"), col.clone());
                }
                Second::Full(v) => ckpt.push(format!("opt/{name}/v"), v.clone()),
            }
            ckpt.push(format!("opt/{name}/m"), self.momentum[i.0].clone());
        }
    }

    fn load_from(&mut self, ckpt: &Checkpoint, params: &ParamStore) -> Result<()> {
        self.k = ckpt.get("opt/step")?.item() as u64;
        for (i, name, _) in params.iter() {
            self.second[i.0] = match &self.second[i.0] {
                Second::Factored { .. } => Second::Factored {
                    row: ckpt.get(&format!("opt/{name}/row"))?.clone(),
                    col: ckpt.get(&format!("opt/{name}/col"))?.clone(),
                },
                Second::Full(_) => Second::Full(ckpt.get(&format!("opt/{name}/v"))?.clone()),
            };
            self.momentum[i.0] = ckpt.get(&format!("opt/{name}/m"))?.clone();
        }
        Ok(())
    }
}

/// Plain Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    k: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamStore) -> Self {
        let z: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, k: 0, m: z.clone(), v: z }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<()> {
        let k = self.k + 1;
        let c1 = 1.0 - self.beta1.powi(k as i32);
        let c2 = 1.0 - self.beta2.powi(k as i32);
        for (i, g) in grads.slots().iter().enumerate() {
            let Some(g) = g else { continue };
            if !g.all_finite() {
                return Err(Error::Diverged("non-finite gradient in Adam step".into()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = &mut params.tensors_mut()[i];
            for (((pp, gg), mm), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mm = self.beta1 * *mm + (1.0 - self.beta1) * gg;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gg * gg;
                *pp -= self.lr * (*mm / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
        self.k = k;
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.k
    }

    fn save_into(&self, ckpt: &mut Checkpoint, params: &ParamStore) {
        ckpt.push("opt/step", Tensor::scalar(self.k as f64));
        for (i, name, _) in params.iter() {
            ckpt.push(format!("opt/{name}/m"), self.m[i.0].clone());
            ckpt.push(format!("opt/{name}/v"), self.v[i.0].clone());
        }
    }

    fn load_from(&mut self, ckpt: &Checkpoint, params: &ParamStore) -> Result<()> {
        self.k = ckpt.get("opt/step")?.item() as u64;
        for (i, name, _) in params.iter() {
            self.m[i.0] = ckpt.get(&format!("opt/{name}/m"))?.clone();
            self.v[i.0] = ckpt.get(&format!("opt/{name}/v"))?.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamId, Tape};

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(1), 1e-2);
        assert_eq!(lr_schedule(10_000), 1e-2);
        assert!((lr_schedule(40_000) - 5e-3).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for k in (1..200_000).step_by(997) {
            let l = lr_schedule(k);
            assert!(l <= prev);
            prev = l;
        }
        assert!((lr_schedule(10_001) - 1e-2).abs() < 1e-6);
    }

    #[test]
    fn beta2_at_32() {
        assert!((beta2(32) - 0.9375).abs() < 1e-12);
        assert!((beta2(32) - (1.0 - 32f64.powf(-0.8))).abs() < 1e-12);
    }

    #[test]
    fn clipping() {
        let mut p = ParamStore::new();
        p.add("g", Tensor::zeros(1, 2));
        let mut g = Grads::empty(1);
        g.slots_mut()[0] = Some(Tensor::row_vector(vec![3.0, 4.0]));
        assert_eq!(clip_global_norm(&mut g, 1.0).unwrap(), 5.0);
        let d = g.slot(ParamId(0)).unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
        let mut small = Grads::empty(1);
        small.slots_mut()[0] = Some(Tensor::row_vector(vec![0.3, 0.4]));
        let before = small.clone();
        clip_global_norm(&mut small, 1.0).unwrap();
        assert_eq!(small, before);
        let mut bad = Grads::empty(1);
        bad.slots_mut()[0] = Some(Tensor::row_vector(vec![f64::NAN, 0.0]));
        assert!(clip_global_norm(&mut bad, 1.0).is_err());
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        p.add("b", Tensor::row_vector(vec![0.5, -0.5]));
        let before = p.clone();
        let mut opt = Adafactor::new(AdafactorConfig::default(), &p);
        let mut g = Grads::empty(2);
        g.slots_mut()[0] = Some(Tensor::zeros(2, 2));
        g.slots_mut()[1] = Some(Tensor::zeros(1, 2));
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.steps(), 1);
    }

    fn bowl_loss(p: &ParamStore) -> (f64, Grads) {
        // f(w) = sum_ij a_ij w_ij^2 with distinct curvatures.
        let mut t = Tape::new(p);
        let w = t.param(ParamId(0));
        let a = t.input(Tensor::from_vec(2, 2, vec![1.0, 3.0, 0.5, 2.0]));
        let ww = t.mul(w, w);
        let aw = t.mul(ww, a);
        let l = t.sum_all(aw);
        (t.value(l).item(), t.backward(l))
    }

    #[test]
    fn adafactor_descends_quadratic_bowl() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::from_vec(2, 2, vec![3.0, -2.0, 1.5, -1.0]));
        let mut opt = Adafactor::new(AdafactorConfig::default(), &p);
        let (mut prev, _) = bowl_loss(&p);
        for _ in 0..100 {
            let (_, g) = bowl_loss(&p);
            opt.step(&mut p, &g).unwrap();
            let (l, _) = bowl_loss(&p);
            assert!(l < prev, "{l} !< {prev}");
            prev = l;
        }
    }

    #[test]
    fn state_round_trips_through_checkpoint() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::from_vec(2, 2, vec![3.0, -2.0, 1.5, -1.0]));
        let mut opt = Adafactor::new(AdafactorConfig::default(), &p);
        for _ in 0..3 {
            let (_, g) = bowl_loss(&p);
            opt.step(&mut p, &g).unwrap();
        }
        let mut ck = Checkpoint::new("t", serde_json::Value::Null);
        opt.save_into(&mut ck, &p);
        let mut other = Adafactor::new(AdafactorConfig::default(), &p);
        other.load_from(&ck, &p).unwrap();
        let mut p2 = p.clone();
        let (_, g) = bowl_loss(&p);
        opt.step(&mut p, &g).unwrap();
        other.step(&mut p2, &g).unwrap();
        assert_eq!(p, p2);
    }
}
