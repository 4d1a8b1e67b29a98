//! Batch loss with gradients, Adam with linear warmup, EMA, and a small training loop.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crystal::{mod1, wrap, Crystal};
use crate::edm::{
    channel_losses, denoise_combine, loss_grad_raw, noise_state_with, sample_sigma, total_loss, DiffusionState, Noise,
};
use crate::error::{Error, Result};
use crate::model::{backward, forward, Model, Params};
use crate::nn::Tensors;
use crate::tokenizer::TokenTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub ema_decay: f64,
    pub seed: u64,
    /// Fraction of examples trained with the token channel held clean (structure prediction).
    pub csp_fraction: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: 1e-3,
            warmup: 200,
            ema_decay: 0.999,
            seed: 0,
            csp_fraction: 0.0,
            grad_clip: 1.0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.ema_decay) || !(0.0..=1.0).contains(&self.csp_fraction) {
            return Err(Error::Config(format!("invalid training hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// Clean diffusion state for a crystal under a token table.
pub fn state_from_crystal(c: &Crystal, table: &TokenTable) -> Result<DiffusionState> {
    let h = table.encode(&c.atomic_numbers)?;
    let f = Array2::from_shape_fn((c.num_atoms(), 3), |(i, k)| c.frac_coords[i][k]);
    Ok(DiffusionState { h, f, y: c.latent()?.0 })
}

/// One fixed noise draw for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub sigma: f64,
    pub eps: Noise,
    pub csp: bool,
}

impl NoiseDraw {
    pub fn sample<R: Rng>(state: &DiffusionState, model: &Model, csp: bool, rng: &mut R) -> Self {
        let sigma = sample_sigma(&model.edm, rng);
        let eps = Noise::draw(state.num_atoms(), state.h.ncols(), rng);
        Self { sigma, eps, csp }
    }
}

/// Mean total loss over the batch and its gradient, for fixed noise draws.
pub fn loss_and_grad_fixed(batch: &[DiffusionState], draws: &[NoiseDraw], model: &Model) -> Result<(f64, Params)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = model.params.zeros_like();
    let mut loss = 0.0;
    for (state, draw) in batch.iter().zip(draws) {
        let noisy = noise_state_with(state, draw.sigma, &draw.eps, draw.csp);
        let (raw, cache) = forward(&noisy, &model.params, &model.cfg, &model.edm)?;
        let pred = denoise_combine(&noisy, &raw, &model.edm);
        let mut l = channel_losses(&pred, state, draw.sigma, &model.edm);
        if draw.csp {
            l.h = 0.0;
        }
        loss += scale * total_loss(&l, &model.edm);
        let up = loss_grad_raw(&pred, state, draw.sigma, &model.edm, scale, draw.csp);
        backward(&up, &cache, &model.params, &model.cfg, &mut grads);
    }
    Ok((loss, grads))
}

/// Loss only, for finite-difference checks.
pub fn loss_fixed(batch: &[DiffusionState], draws: &[NoiseDraw], model: &Model) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (state, draw) in batch.iter().zip(draws) {
        let noisy = noise_state_with(state, draw.sigma, &draw.eps, draw.csp);
        let (raw, _) = forward(&noisy, &model.params, &model.cfg, &model.edm)?;
        let pred = denoise_combine(&noisy, &raw, &model.edm);
        let mut l = channel_losses(&pred, state, draw.sigma, &model.edm);
        if draw.csp {
            l.h = 0.0;
        }
        loss += scale * total_loss(&l, &model.edm);
    }
    Ok(loss)
}

/// Sample σ and noise per crystal, then evaluate loss and gradients.
pub fn loss_and_gradients<R: Rng>(batch: &[DiffusionState], model: &Model, rng: &mut R) -> Result<(f64, Params)> {
    let draws: Vec<NoiseDraw> = batch.iter().map(|s| NoiseDraw::sample(s, model, false, rng)).collect();
    loss_and_grad_fixed(batch, &draws, model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Linear warmup from `lr/warmup` to `lr`.
pub fn lr_at(step: usize, base: f64, warmup: usize) -> f64 {
    if warmup == 0 {
        base
    } else {
        base * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

pub fn grad_norm(grads: &Params) -> f64 {
    grads.named().iter().map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// One Adam update followed by the EMA update.
pub fn train_step(params: &mut Params, ema: &mut Params, grads: &Params, opt: &mut AdamState, lr: f64, decay: f64) {
    opt.t += 1;
    let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.eps);
    let c1 = 1.0 - b1.powi(opt.t as i32);
    let c2 = 1.0 - b2.powi(opt.t as i32);
    let g = grads.named();
    let m = opt.m.named_mut();
    let v = opt.v.named_mut();
    let p = params.named_mut();
    for (((pt, gt), mt), vt) in p.into_iter().zip(g).zip(m).zip(v) {
        ndarray::Zip::from(pt.1)
            .and(gt.1)
            .and(mt.1)
            .and(vt.1)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
    }
    for ((_, e), (_, p)) in ema.named_mut().into_iter().zip(params.named()) {
        ndarray::Zip::from(e).and(p).for_each(|e, &p| *e = decay * *e + (1.0 - decay) * p);
    }
}

/// Training loop state over a fixed set of clean examples.
pub struct Trainer {
    pub model: Model,
    pub ema: Params,
    pub opt: AdamState,
    pub cfg: TrainConfig,
    pub step: usize,
    data: Vec<DiffusionState>,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

impl Trainer {
    pub fn new(model: Model, data: Vec<DiffusionState>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let ema = model.params.clone();
        let opt = AdamState::new(&model.params);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
        Ok(Self { model, ema, opt, cfg, step: 0, data, rng })
    }

    pub fn data(&self) -> &[DiffusionState] {
        &self.data
    }

    pub fn step(&mut self) -> Result<StepStats> {
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        let mut draws = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let mut s = self.data[self.rng.gen_range(0..self.data.len())].clone();
            if self.cfg.augment {
                let t: [f64; 3] = self.rng.gen();
                for mut row in s.f.rows_mut() {
                    for k in 0..3 {
                        row[k] = mod1(row[k] + t[k]);
                    }
                }
            }
            let csp = self.cfg.csp_fraction > 0.0 && self.rng.gen::<f64>() < self.cfg.csp_fraction;
            draws.push(NoiseDraw::sample(&s, &self.model, csp, &mut self.rng));
            batch.push(s);
        }
        let (loss, mut grads) = loss_and_grad_fixed(&batch, &draws, &self.model)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.step)));
        }
        let norm = grad_norm(&grads);
        if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            let k = self.cfg.grad_clip / norm;
            for (_, t) in grads.named_mut() {
                *t *= k;
            }
        }
        let lr = lr_at(self.step, self.cfg.lr, self.cfg.warmup);
        train_step(&mut self.model.params, &mut self.ema, &grads, &mut self.opt, lr, self.cfg.ema_decay);
        let stats = StepStats { step: self.step, loss, grad_norm: norm, lr };
        self.step += 1;
        Ok(stats)
    }

    /// Model carrying the EMA weights.
    pub fn ema_model(&self) -> Model {
        Model { cfg: self.model.cfg.clone(), edm: self.model.edm, params: self.ema.clone() }
    }
}

/// One-shot denoising quality at a fixed noise level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DenoiseMetrics {
    /// Translation-aligned wrapped coordinate RMSE.
    pub coord_rmse: f64,
    /// Fraction of atoms whose denoised token decodes to the right element.
    pub decode_accuracy: f64,
    pub lattice_rmse: f64,
}

/// Wrapped RMSE after removing the best global shift (circular mean of the residuals).
pub fn aligned_wrapped_rmse(pred: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let n = pred.nrows();
    let mut shift = [0.0; 3];
    for k in 0..3 {
        let (mut sx, mut sy) = (0.0, 0.0);
        for i in 0..n {
            let a = std::f64::consts::TAU * wrap(pred[(i, k)] - target[(i, k)]);
            sx += a.cos();
            sy += a.sin();
        }
        shift[k] = sy.atan2(sx) / std::f64::consts::TAU;
    }
    let mut s = 0.0;
    for i in 0..n {
        for k in 0..3 {
            s += wrap(pred[(i, k)] - target[(i, k)] - shift[k]).powi(2);
        }
    }
    (s / (3 * n) as f64).sqrt()
}

pub fn denoise_metrics(model: &Model, data: &[DiffusionState], elements: &[Vec<u8>], table: &TokenTable, sigma: f64, seed: u64) -> Result<DenoiseMetrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut rmse, mut correct, mut atoms, mut lat) = (0.0, 0usize, 0usize, 0.0);
    for (state, zs) in data.iter().zip(elements) {
        let eps = Noise::draw(state.num_atoms(), state.h.ncols(), &mut rng);
        let noisy = noise_state_with(state, sigma, &eps, false);
        let raw = model.raw(&noisy)?;
        let pred = denoise_combine(&noisy, &raw, &model.edm);
        rmse += aligned_wrapped_rmse(&pred.f, &state.f).powi(2);
        for (i, &z) in zs.iter().enumerate() {
            let row = pred.h.row(i).to_vec();
            if table.decode(&row).ok() == Some(z) {
                correct += 1;
            }
        }
        atoms += zs.len();
        lat += (0..6).map(|k| (pred.y[k] - state.y[k]).powi(2)).sum::<f64>() / 6.0;
    }
    let n = data.len() as f64;
    Ok(DenoiseMetrics {
        coord_rmse: (rmse / n).sqrt(),
        decode_accuracy: correct as f64 / atoms.max(1) as f64,
        lattice_rmse: (lat / n).sqrt(),
    })
}
