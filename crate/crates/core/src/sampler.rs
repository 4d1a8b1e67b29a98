//! Karras-schedule Heun sampler with churn and channel-wise anti-annealing.

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::crystal::{lattice_from_latent, mod1, wrap, Crystal, LatticeLatent};
use crate::edm::{denoise_combine, precondition, DiffusionState, NoisyState, Prediction};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tokenizer::TokenTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub s_churn: f64,
    pub s_noise: f64,
    pub s_min: f64,
    pub s_max: f64,
    /// Auxiliary schedule exponents per channel; `None` disables anti-annealing.
    pub aa_types: Option<f64>,
    pub aa_coords: Option<f64>,
    pub aa_lattice: Option<f64>,
    /// Cap on the coordinate anti-annealing factor.
    pub alpha_max: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 150,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            s_churn: 60.0,
            s_noise: 1.003,
            s_min: 0.0,
            s_max: 999.0,
            aa_types: None,
            aa_coords: None,
            aa_lattice: None,
            alpha_max: 3.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps < 1 {
            return bad("steps must be at least 1");
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return bad("need 0 < sigma_min < sigma_max");
        }
        if !(self.rho > 0.0) {
            return bad("rho must be positive");
        }
        for r in [self.aa_types, self.aa_coords, self.aa_lattice].into_iter().flatten() {
            if !(r > 0.0) {
                return bad("anti-annealing exponents must be positive");
            }
        }
        if !(self.s_churn >= 0.0 && self.s_noise >= 0.0 && self.s_min <= self.s_max) {
            return bad("invalid churn settings");
        }
        if !(self.alpha_max >= 1.0) {
            return bad("alpha_max must be at least 1");
        }
        Ok(())
    }
}

fn karras(n: usize, lo: f64, hi: f64, rho: f64) -> Vec<f64> {
    let mut s = Vec::with_capacity(n + 1);
    if n == 1 {
        s.push(hi);
    } else {
        let (a, b) = (hi.powf(1.0 / rho), lo.powf(1.0 / rho));
        for i in 0..n {
            let t = i as f64 / (n - 1) as f64;
            s.push((a + t * (b - a)).powf(rho));
        }
        s[n - 1] = lo;
    }
    s[0] = hi;
    s.push(0.0);
    s
}

/// `σ_0 = σ_max, …, σ_{N−1} = σ_min, σ_N = 0`.
pub fn karras_schedule(cfg: &SamplerConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    Ok(karras(cfg.steps, cfg.sigma_min, cfg.sigma_max, cfg.rho))
}

/// Churn factor γ_i.
pub fn churn_gamma(sigma: f64, cfg: &SamplerConfig) -> f64 {
    if cfg.s_churn > 0.0 && sigma >= cfg.s_min && sigma <= cfg.s_max {
        (cfg.s_churn / cfg.steps as f64).min(std::f64::consts::SQRT_2 - 1.0)
    } else {
        0.0
    }
}

/// Anti-annealing factors per step for the token, coordinate and lattice channels.
#[derive(Debug, Clone, PartialEq)]
pub struct AaFactors {
    pub h: Vec<f64>,
    pub f: Vec<f64>,
    pub y: Vec<f64>,
}

pub fn aa_factors(cfg: &SamplerConfig) -> Result<AaFactors> {
    let base = karras_schedule(cfg)?;
    let channel = |rho: Option<f64>, cap: f64| -> Vec<f64> {
        let Some(rho) = rho else {
            return vec![1.0; cfg.steps];
        };
        let aux = karras(cfg.steps, cfg.sigma_min, cfg.sigma_max, rho);
        (0..cfg.steps)
            .map(|i| ((aux[i] - aux[i + 1]) / (base[i] - base[i + 1])).max(1.0).min(cap))
            .collect()
    };
    Ok(AaFactors {
        h: channel(cfg.aa_types, f64::INFINITY),
        f: channel(cfg.aa_coords, cfg.alpha_max),
        y: channel(cfg.aa_lattice, f64::INFINITY),
    })
}

/// CSV table of `i, sigma, alpha_h, alpha_f, alpha_lat`; the terminal row has no step.
pub fn schedule_csv(cfg: &SamplerConfig) -> Result<String> {
    let s = karras_schedule(cfg)?;
    let a = aa_factors(cfg)?;
    let mut out = String::from("i,sigma,alpha_h,alpha_f,alpha_lat\n");
    for (i, sigma) in s.iter().enumerate() {
        if i < cfg.steps {
            out.push_str(&format!("{i},{sigma},{},{},{}\n", a.h[i], a.f[i], a.y[i]));
        } else {
            out.push_str(&format!("{i},{sigma},,,\n"));
        }
    }
    Ok(out)
}

/// Anything that maps a noisy state to a denoised estimate.
pub trait Denoiser {
    fn denoise(&self, x: &NoisyState) -> Result<Prediction>;
}

impl Denoiser for Model {
    fn denoise(&self, x: &NoisyState) -> Result<Prediction> {
        let raw = self.raw(x)?;
        Ok(denoise_combine(x, &raw, &self.edm))
    }
}

/// Exact posterior mean for zero-mean Gaussian data with standard deviation `sigma_data`
/// in every channel. The coordinate channel is treated as flat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianDenoiser {
    pub sigma_data: f64,
}

impl Denoiser for GaussianDenoiser {
    fn denoise(&self, x: &NoisyState) -> Result<Prediction> {
        let k = precondition(x.sigma, self.sigma_data).c_skip;
        let f_c = &x.f_c * k;
        Ok(Prediction {
            h: &x.h * k,
            f: f_c.mapv(|v| mod1(v + 0.5)),
            f_c,
            y: x.y.map(|v| v * k),
        })
    }
}

/// Optimal denoiser of an empirical set of states (memorizes its training set).
/// Coordinates use wrapped residuals, so each example acts as a periodic point mass.
/// Clean tokens condition exactly: only examples with identical tokens contribute.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDenoiser {
    pub data: Vec<DiffusionState>,
}

impl Denoiser for EmpiricalDenoiser {
    fn denoise(&self, x: &NoisyState) -> Result<Prediction> {
        let n = x.num_atoms();
        let cands: Vec<&DiffusionState> = self
            .data
            .iter()
            .filter(|d| d.num_atoms() == n && d.h.ncols() == x.h.ncols() && (!x.h_clean || d.h == x.h))
            .collect();
        if cands.is_empty() {
            return Err(Error::InvalidInput(format!("no reference state with {n} atoms")));
        }
        let two_s2 = 2.0 * x.sigma * x.sigma;
        let logw: Vec<f64> = cands
            .iter()
            .map(|d| {
                let dh: f64 = (&x.h - &d.h).mapv(|v| v * v).sum();
                let df: f64 = x.f_c.iter().zip(d.f.iter()).map(|(a, b)| wrap(a - (b - 0.5)).powi(2)).sum();
                let dy: f64 = (0..6).map(|k| (x.y[k] - d.y[k]).powi(2)).sum();
                -(dh + df + dy) / two_s2
            })
            .collect();
        let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
        let total: f64 = w.iter().sum();
        let mut h = Array2::zeros(x.h.raw_dim());
        let mut resid = Array2::zeros(x.f_c.raw_dim());
        let mut y = [0.0; 6];
        for (d, wi) in cands.iter().zip(&w) {
            let p = wi / total;
            h.scaled_add(p, &d.h);
            Zip::from(&mut resid).and(&x.f_c).and(&d.f).for_each(|r: &mut f64, &a, &b| *r += p * wrap(a - (b - 0.5)));
            for k in 0..6 {
                y[k] += p * d.y[k];
            }
        }
        let f_c = &x.f_c - &resid;
        Ok(Prediction { h, f: f_c.mapv(|v| mod1(v + 0.5)), f_c, y })
    }
}

/// Sampler state: tokens, centered running coordinates and lattice latent.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleState {
    pub h: Array2<f64>,
    pub f_c: Array2<f64>,
    pub y: [f64; 6],
}

impl SampleState {
    fn noisy(&self, sigma: f64, freeze_h: bool) -> NoisyState {
        NoisyState::from_centered(self.h.clone(), self.f_c.clone(), self.y, sigma).with_clean_tokens(freeze_h)
    }

    fn is_finite(&self) -> bool {
        self.h.iter().chain(self.f_c.iter()).chain(self.y.iter()).all(|v| v.is_finite())
    }

    /// Fractional coordinates in `[0,1)`.
    pub fn frac(&self) -> Array2<f64> {
        self.f_c.mapv(|v| mod1(v + 0.5))
    }
}

struct Drift {
    h: Array2<f64>,
    f: Array2<f64>,
    y: [f64; 6],
}

fn drift(z: &SampleState, d: &Prediction, sigma: f64) -> Drift {
    let h = (&z.h - &d.h) / sigma;
    let mut f = Array2::zeros(z.f_c.raw_dim());
    Zip::from(&mut f).and(&z.f_c).and(&d.f_c).for_each(|o, &a, &b| *o = wrap(a - b) / sigma);
    let mut y = [0.0; 6];
    for k in 0..6 {
        y[k] = (z.y[k] - d.y[k]) / sigma;
    }
    Drift { h, f, y }
}

/// Precomputed schedule for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub cfg: SamplerConfig,
    pub sigmas: Vec<f64>,
    pub alpha: AaFactors,
}

impl Plan {
    pub fn new(cfg: &SamplerConfig) -> Result<Self> {
        Ok(Self { cfg: *cfg, sigmas: karras_schedule(cfg)?, alpha: aa_factors(cfg)? })
    }
}

fn add_noise<R: Rng>(a: &mut Array2<f64>, std: f64, rng: &mut R) {
    for v in a.iter_mut() {
        let e: f64 = StandardNormal.sample(rng);
        *v += std * e;
    }
}

/// One churned Heun step from `σ_i` to `σ_{i+1}`. With `freeze_h` the token channel is untouched.
pub fn heun_step<D: Denoiser + ?Sized, R: Rng>(
    z: SampleState,
    i: usize,
    den: &D,
    plan: &Plan,
    freeze_h: bool,
    rng: &mut R,
) -> Result<SampleState> {
    let (s, s_next) = (plan.sigmas[i], plan.sigmas[i + 1]);
    let gamma = churn_gamma(s, &plan.cfg);
    let s_bar = (1.0 + gamma) * s;
    let mut zb = z;
    if gamma > 0.0 {
        let std = plan.cfg.s_noise * (s_bar * s_bar - s * s).sqrt();
        if !freeze_h {
            add_noise(&mut zb.h, std, rng);
        }
        add_noise(&mut zb.f_c, std, rng);
        for v in zb.y.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += std * e;
        }
    }
    let diverged = |_| Error::SamplerDiverged(i);
    let d0 = drift(&zb, &den.denoise(&zb.noisy(s_bar, freeze_h)).map_err(diverged)?, s_bar);
    let (ah, af, ay) = (plan.alpha.h[i], plan.alpha.f[i], plan.alpha.y[i]);
    let dt = s_next - s_bar;
    let euler = |d: &Drift| {
        let h = if freeze_h { zb.h.clone() } else { &zb.h + &(&d.h * (dt * ah)) };
        let f_c = (&zb.f_c + &(&d.f * (dt * af))).mapv(wrap);
        let mut y = zb.y;
        for k in 0..6 {
            y[k] += dt * ay * d.y[k];
        }
        SampleState { h, f_c, y }
    };
    let mut out = euler(&d0);
    if s_next > 0.0 {
        let d1 = drift(&out, &den.denoise(&out.noisy(s_next, freeze_h)).map_err(diverged)?, s_next);
        let avg = Drift { h: (&d0.h + &d1.h) * 0.5, f: (&d0.f + &d1.f) * 0.5, y: std::array::from_fn(|k| 0.5 * (d0.y[k] + d1.y[k])) };
        out = euler(&avg);
    }
    if !out.is_finite() {
        return Err(Error::SamplerDiverged(i));
    }
    Ok(out)
}

/// Run the full schedule from `init` (already scaled to `σ_0`).
pub fn run<D: Denoiser + ?Sized, R: Rng>(init: SampleState, den: &D, plan: &Plan, freeze_h: bool, rng: &mut R) -> Result<SampleState> {
    let mut z = init;
    for i in 0..plan.cfg.steps {
        z = heun_step(z, i, den, plan, freeze_h, rng)?;
    }
    Ok(z)
}

fn gaussian<R: Rng>(shape: (usize, usize), std: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
}

/// Initial state drawn from `N(0, σ_0² I)`; `h` is kept when given.
pub fn init_state<R: Rng>(n: usize, d_h: usize, h: Option<Array2<f64>>, sigma0: f64, rng: &mut R) -> SampleState {
    let h = h.unwrap_or_else(|| gaussian((n, d_h), sigma0, rng));
    let f_c = gaussian((n, 3), sigma0, rng).mapv(wrap);
    let y = std::array::from_fn(|_| sigma0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng));
    SampleState { h, f_c, y }
}

fn to_crystal(z: &SampleState, atomic_numbers: Vec<u8>) -> Result<Crystal> {
    let lattice = lattice_from_latent(&LatticeLatent(z.y))?;
    let f = z.frac();
    let coords = f.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
    Crystal::new(atomic_numbers, coords, lattice)
}

/// Unconditional generation of an `n_atoms` crystal. Fails with `ZeroToken` when a token
/// cannot be decoded; the caller may resample.
pub fn sample_dng<D: Denoiser + ?Sized, R: Rng>(den: &D, table: &TokenTable, n_atoms: usize, cfg: &SamplerConfig, rng: &mut R) -> Result<Crystal> {
    if n_atoms == 0 {
        return Err(Error::InvalidInput("n_atoms must be positive".into()));
    }
    let plan = Plan::new(cfg)?;
    let init = init_state(n_atoms, table.token_dim(), None, plan.sigmas[0], rng);
    let z = run(init, den, &plan, false, rng)?;
    let zs = z.h.rows().into_iter().map(|r| table.decode(r.as_slice().expect("contiguous row"))).collect::<Result<Vec<_>>>()?;
    to_crystal(&z, zs)
}

/// Structure prediction for a fixed composition; the token channel is frozen.
pub fn sample_csp<D: Denoiser + ?Sized, R: Rng>(den: &D, composition: &[u8], table: &TokenTable, cfg: &SamplerConfig, rng: &mut R) -> Result<Crystal> {
    if composition.is_empty() {
        return Err(Error::InvalidInput("empty composition".into()));
    }
    let h = table.encode(composition)?;
    let plan = Plan::new(cfg)?;
    let init = init_state(composition.len(), h.ncols(), Some(h), plan.sigmas[0], rng);
    let z = run(init, den, &plan, true, rng)?;
    to_crystal(&z, composition.to_vec())
}

/// Independent per-chain generator: chain `i` of run `seed` always sees the same stream.
pub fn chain_rng(seed: u64, i: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i);
    rng
}
