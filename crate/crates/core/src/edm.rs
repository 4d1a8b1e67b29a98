//! EDM noise sampling, preconditioning, joint noising and the three-channel loss.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::crystal::{mod1, wrap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdmConfig {
    pub p_mean: f64,
    pub p_std: f64,
    pub sigma_data_h: f64,
    pub sigma_data_f: f64,
    pub sigma_data_lat: f64,
    pub lambda_h: f64,
    pub lambda_f: f64,
    pub lambda_lat: f64,
}

impl Default for EdmConfig {
    fn default() -> Self {
        Self {
            p_mean: -1.2,
            p_std: 1.2,
            sigma_data_h: 0.3,
            sigma_data_f: 0.3,
            sigma_data_lat: 0.3,
            lambda_h: 1.0,
            lambda_f: 50.0,
            lambda_lat: 5.0,
        }
    }
}

impl EdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_std > 0.0) {
            return Err(Error::Config(format!("p_std must be positive, got {}", self.p_std)));
        }
        for (k, v) in [
            ("sigma_data_h", self.sigma_data_h),
            ("sigma_data_f", self.sigma_data_f),
            ("sigma_data_lat", self.sigma_data_lat),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        for (k, v) in [
            ("lambda_h", self.lambda_h),
            ("lambda_f", self.lambda_f),
            ("lambda_lat", self.lambda_lat),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{k} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Clean or noisy diffusion state. `f` holds fractional coordinates in `[0,1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub h: Array2<f64>,
    pub f: Array2<f64>,
    pub y: [f64; 6],
}

impl DiffusionState {
    pub fn num_atoms(&self) -> usize {
        self.h.nrows()
    }
}

/// Noisy state with both coordinate views: `f_in` (wrapped, network input) and
/// `f_c` (centered, unwrapped, used by the combine step).
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyState {
    pub h: Array2<f64>,
    pub f_in: Array2<f64>,
    pub f_c: Array2<f64>,
    pub y: [f64; 6],
    pub sigma: f64,
    /// Tokens carry no noise (structure prediction): they are preconditioned as at
    /// σ = 0 and passed through the combine step unchanged.
    pub h_clean: bool,
}

impl NoisyState {
    /// Build from a centered running coordinate value.
    pub fn from_centered(h: Array2<f64>, f_c: Array2<f64>, y: [f64; 6], sigma: f64) -> Self {
        let f_in = f_c.mapv(|v| mod1(v + 0.5));
        Self { h, f_in, f_c, y, sigma, h_clean: false }
    }

    pub fn with_clean_tokens(mut self, clean: bool) -> Self {
        self.h_clean = clean;
        self
    }

    /// Input scale for the token channel.
    pub fn token_c_in(&self, sigma_data: f64) -> f64 {
        if self.h_clean {
            1.0 / sigma_data
        } else {
            precondition(self.sigma, sigma_data).c_in
        }
    }

    pub fn num_atoms(&self) -> usize {
        self.h.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn sample_sigma<R: Rng>(cfg: &EdmConfig, rng: &mut R) -> f64 {
    let xi: f64 = StandardNormal.sample(rng);
    (cfg.p_mean + cfg.p_std * xi).exp()
}

pub fn precondition(sigma: f64, sigma_data: f64) -> Precond {
    let s2 = sigma * sigma + sigma_data * sigma_data;
    Precond {
        c_skip: sigma_data * sigma_data / s2,
        c_out: sigma * sigma_data / s2.sqrt(),
        c_in: 1.0 / s2.sqrt(),
        c_noise: 0.25 * sigma.ln(),
    }
}

/// Loss weight `(σ² + σ_d²)/(σ·σ_d)²`.
pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

/// Unit Gaussian noise for every channel, drawn in the order H, F, y.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub h: Array2<f64>,
    pub f: Array2<f64>,
    pub y: [f64; 6],
}

impl Noise {
    pub fn draw<R: Rng>(n: usize, d_h: usize, rng: &mut R) -> Self {
        let h = Array2::from_shape_simple_fn((n, d_h), || StandardNormal.sample(rng));
        let f = Array2::from_shape_simple_fn((n, 3), || StandardNormal.sample(rng));
        let mut y = [0.0; 6];
        for v in y.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        Self { h, f, y }
    }
}

pub fn noise_state<R: Rng>(clean: &DiffusionState, sigma: f64, rng: &mut R) -> NoisyState {
    let eps = Noise::draw(clean.num_atoms(), clean.h.ncols(), rng);
    noise_state_with(clean, sigma, &eps, false)
}

/// Deterministic noising from a fixed draw. With `freeze_h` the token channel stays clean.
pub fn noise_state_with(clean: &DiffusionState, sigma: f64, eps: &Noise, freeze_h: bool) -> NoisyState {
    let h = if freeze_h {
        clean.h.clone()
    } else {
        &clean.h + &(&eps.h * sigma)
    };
    let f_c = clean.f.mapv(|v| v - 0.5) + &eps.f * sigma;
    let mut y = clean.y;
    for k in 0..6 {
        y[k] += sigma * eps.y[k];
    }
    NoisyState::from_centered(h, f_c, y, sigma).with_clean_tokens(freeze_h)
}

/// Raw network outputs for the three channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawOutput {
    pub h: Array2<f64>,
    pub f: Array2<f64>,
    pub y: [f64; 6],
}

/// Denoised estimate. `f` is in `[0,1)`, `f_c` is the centered value before wrapping.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub h: Array2<f64>,
    pub f: Array2<f64>,
    pub f_c: Array2<f64>,
    pub y: [f64; 6],
}

pub fn denoise_combine(noisy: &NoisyState, raw: &RawOutput, cfg: &EdmConfig) -> Prediction {
    let s = noisy.sigma;
    let ph = precondition(s, cfg.sigma_data_h);
    let pf = precondition(s, cfg.sigma_data_f);
    let pl = precondition(s, cfg.sigma_data_lat);
    let h = if noisy.h_clean { noisy.h.clone() } else { &noisy.h * ph.c_skip + &raw.h * ph.c_out };
    let f_c = &noisy.f_c * pf.c_skip + &raw.f * pf.c_out;
    let f = f_c.mapv(|v| mod1(v + 0.5));
    let mut y = [0.0; 6];
    for k in 0..6 {
        y[k] = pl.c_skip * noisy.y[k] + pl.c_out * raw.y[k];
    }
    Prediction { h, f, f_c, y }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ChannelLosses {
    pub h: f64,
    pub f: f64,
    pub lat: f64,
}

impl ChannelLosses {
    pub fn total(&self, cfg: &EdmConfig) -> f64 {
        total_loss(self, cfg)
    }
}

pub fn channel_losses(pred: &Prediction, target: &DiffusionState, sigma: f64, cfg: &EdmConfig) -> ChannelLosses {
    let n = target.num_atoms() as f64;
    let lh = (&pred.h - &target.h).mapv(|v| v * v).sum();
    let lf: f64 = pred
        .f
        .iter()
        .zip(target.f.iter())
        .map(|(a, b)| wrap(a - b).powi(2))
        .sum();
    let ll: f64 = (0..6).map(|k| (pred.y[k] - target.y[k]).powi(2)).sum();
    ChannelLosses {
        h: loss_weight(sigma, cfg.sigma_data_h) * lh / n,
        f: loss_weight(sigma, cfg.sigma_data_f) * lf / n,
        lat: loss_weight(sigma, cfg.sigma_data_lat) * ll / 6.0,
    }
}

pub fn total_loss(l: &ChannelLosses, cfg: &EdmConfig) -> f64 {
    cfg.lambda_h * l.h + cfg.lambda_f * l.f + cfg.lambda_lat * l.lat
}

/// Gradients of `scale · total_loss` with respect to the raw network outputs.
/// `mask_h` drops the token channel (its loss is not counted).
pub fn loss_grad_raw(
    pred: &Prediction,
    target: &DiffusionState,
    sigma: f64,
    cfg: &EdmConfig,
    scale: f64,
    mask_h: bool,
) -> RawOutput {
    let n = target.num_atoms() as f64;
    let c = |sd: f64, lambda: f64, denom: f64| {
        scale * lambda * loss_weight(sigma, sd) * 2.0 / denom * precondition(sigma, sd).c_out
    };
    let kh = if mask_h { 0.0 } else { c(cfg.sigma_data_h, cfg.lambda_h, n) };
    let kf = c(cfg.sigma_data_f, cfg.lambda_f, n);
    let kl = c(cfg.sigma_data_lat, cfg.lambda_lat, 6.0);
    let h = (&pred.h - &target.h) * kh;
    let mut f = Array2::zeros(pred.f.raw_dim());
    ndarray::Zip::from(&mut f)
        .and(&pred.f)
        .and(&target.f)
        .for_each(|g, &a, &b| *g = kf * wrap(a - b));
    let mut y = [0.0; 6];
    for k in 0..6 {
        y[k] = kl * (pred.y[k] - target.y[k]);
    }
    RawOutput { h, f, y }
}
