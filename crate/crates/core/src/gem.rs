//! Geometry-biased attention: per-head additive logits built from minimum-image
//! pair geometry, gated by noise level, with a zero row and column for the lattice token.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crystal::{cell_scale, lattice_from_latent_unchecked, lattice_parameters, metric_tensor, min_image_delta, wrap3, Frac};
use crate::error::{Error, Result};
use crate::nn::{fourier_features, sigmoid, softmax_rows, softplus, Mlp, MlpCache, Tensors};

/// Latent clamp used for geometry only: keeps `exp` finite at high noise.
const LOG_DIAG_CLAMP: f64 = 5.0;
const OFFDIAG_CLAMP: f64 = 150.0;
pub const PSI_DIM: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GemConfig {
    pub enabled: bool,
    pub num_heads: usize,
    pub radius: i32,
    pub fourier_freqs: usize,
    pub rbf_count: usize,
    pub rbf_max: f64,
    pub edge_hidden: usize,
    pub gate: bool,
    pub distance_bias: bool,
    pub edge_bias: bool,
}

impl Default for GemConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            num_heads: 4,
            radius: 1,
            fourier_freqs: 12,
            rbf_count: 32,
            rbf_max: 2.0,
            edge_hidden: 256,
            gate: true,
            distance_bias: true,
            edge_bias: true,
        }
    }
}

impl GemConfig {
    pub fn feature_dim(&self) -> usize {
        6 * self.fourier_freqs + self.rbf_count + PSI_DIM
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.radius < 1 || self.rbf_count < 2 || self.edge_hidden == 0 {
            return Err(Error::Config(format!("invalid GEM configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GemParams {
    /// Free slope parameters θ_h; the slope is `-softplus(θ_h)`.
    pub slope_raw: Array2<f64>,
    pub gate_scale: Array2<f64>,
    pub gate_bias: Array2<f64>,
    pub edge: Mlp,
}

impl GemParams {
    pub fn new<R: Rng>(cfg: &GemConfig, rng: &mut R) -> Self {
        let h = cfg.num_heads;
        Self {
            slope_raw: Array2::zeros((1, h)),
            gate_scale: Array2::zeros((1, h)),
            gate_bias: Array2::zeros((1, h)),
            edge: Mlp::new(cfg.feature_dim(), cfg.edge_hidden, h, rng),
        }
    }

    pub fn slopes(&self) -> Vec<f64> {
        self.slope_raw.iter().map(|&t| -softplus(t)).collect()
    }
}

impl Tensors for GemParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        out.push((format!("{prefix}.slope_raw"), &self.slope_raw));
        out.push((format!("{prefix}.gate_scale"), &self.gate_scale));
        out.push((format!("{prefix}.gate_bias"), &self.gate_bias));
        self.edge.visit(&format!("{prefix}.edge"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        out.push((format!("{prefix}.slope_raw"), &mut self.slope_raw));
        out.push((format!("{prefix}.gate_scale"), &mut self.gate_scale));
        out.push((format!("{prefix}.gate_bias"), &mut self.gate_bias));
        self.edge.visit_mut(&format!("{prefix}.edge"), out);
    }
}

fn clamp_latent(y: &[f64; 6]) -> [f64; 6] {
    let mut c = *y;
    for k in [0, 2, 5] {
        c[k] = c[k].clamp(-LOG_DIAG_CLAMP, LOG_DIAG_CLAMP);
    }
    for k in [1, 3, 4] {
        c[k] = c[k].clamp(-OFFDIAG_CLAMP, OFFDIAG_CLAMP);
    }
    c
}

/// Pair geometry: minimum-image displacements (row-major `i*N + j`) and normalized distances.
/// The search starts from the wrapped difference, so the result depends on coordinates only mod 1.
pub fn pairwise_geometry(f: &ArrayView2<f64>, y: &[f64; 6], radius: i32) -> (Vec<Frac>, Array2<f64>) {
    let n = f.nrows();
    let lat = lattice_from_latent_unchecked(&clamp_latent(y));
    let g = metric_tensor(&lat);
    let scale = cell_scale(&lat);
    let mut deltas = vec![[0.0; 3]; n * n];
    let mut dbar = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = wrap3([f[(i, 0)] - f[(j, 0)], f[(i, 1)] - f[(j, 1)], f[(i, 2)] - f[(j, 2)]]);
            let best = min_image_delta(&d, &g, radius);
            deltas[i * n + j] = best;
            dbar[(i, j)] = crate::crystal::quad_form(&best, &g).max(0.0).sqrt() / scale;
        }
    }
    (deltas, dbar)
}

/// `[a, b, c, cos α, cos β, cos γ, ln V, s, ln s]` of `L(y)`.
pub fn lattice_descriptor(y: &[f64; 6]) -> [f64; PSI_DIM] {
    let lat = lattice_from_latent_unchecked(&clamp_latent(y));
    let (len, ang) = lattice_parameters(&lat);
    let s = cell_scale(&lat);
    let c = clamp_latent(y);
    let ln_v = c[0] + c[2] + c[5];
    [
        len[0],
        len[1],
        len[2],
        ang[0].to_radians().cos(),
        ang[1].to_radians().cos(),
        ang[2].to_radians().cos(),
        ln_v,
        s,
        s.ln(),
    ]
}

/// Gaussian RBF features with `count` centers on `[0, max]` and width equal to the spacing.
pub fn rbf_features(d: f64, count: usize, max: f64) -> Vec<f64> {
    let width = max / (count - 1) as f64;
    (0..count)
        .map(|k| {
            let c = k as f64 * width;
            (-((d - c) / width).powi(2)).exp()
        })
        .collect()
}

/// Per-pair edge features `φ_ij`, one row per ordered pair.
pub fn edge_features(deltas: &[Frac], dbar: &Array2<f64>, psi: &[f64; PSI_DIM], cfg: &GemConfig) -> Array2<f64> {
    let pairs = deltas.len();
    let dims = cfg.feature_dim();
    let mut phi = Array2::zeros((pairs, dims));
    let disp = Array2::from_shape_fn((pairs, 3), |(p, k)| deltas[p][k]);
    let four = fourier_features(&disp.view(), cfg.fourier_freqs);
    let nf = four.ncols();
    phi.slice_mut(s![.., ..nf]).assign(&four);
    let n = dbar.nrows();
    for p in 0..pairs {
        let r = rbf_features(dbar[(p / n, p % n)], cfg.rbf_count, cfg.rbf_max);
        for (k, v) in r.into_iter().enumerate() {
            phi[(p, nf + k)] = v;
        }
        for k in 0..PSI_DIM {
            phi[(p, nf + cfg.rbf_count + k)] = psi[k];
        }
    }
    phi
}

/// `w_h · d̄` for each head.
pub fn distance_bias(dbar: &Array2<f64>, slopes: &[f64]) -> Vec<Array2<f64>> {
    slopes.iter().map(|&w| dbar * w).collect()
}

/// Edge MLP output per head, reshaped to `N × N`.
pub fn edge_bias(phi: &Array2<f64>, n: usize, edge: &Mlp) -> (Vec<Array2<f64>>, MlpCache) {
    let (out, cache) = edge.forward(&phi.view());
    let heads = out.ncols();
    let per_head = (0..heads)
        .map(|h| Array2::from_shape_fn((n, n), |(i, j)| out[(i * n + j, h)]))
        .collect();
    (per_head, cache)
}

#[derive(Debug, Clone)]
pub struct GemCache {
    pub n: usize,
    pub dbar: Array2<f64>,
    pub phi: Array2<f64>,
    pub edge_cache: Option<MlpCache>,
    pub edge: Vec<Array2<f64>>,
    pub gates: Vec<f64>,
    pub c_noise: f64,
}

/// Full bias `h × (N+1) × (N+1)`; the last row and column (lattice token) are zero.
pub fn gem_bias(
    f_in: &ArrayView2<f64>,
    y: &[f64; 6],
    c_noise: f64,
    params: &GemParams,
    cfg: &GemConfig,
) -> (Vec<Array2<f64>>, GemCache) {
    let n = f_in.nrows();
    let heads = cfg.num_heads;
    let (deltas, dbar) = pairwise_geometry(f_in, y, cfg.radius);
    let psi = lattice_descriptor(y);
    let phi = if cfg.edge_bias {
        edge_features(&deltas, &dbar, &psi, cfg)
    } else {
        Array2::zeros((0, 0))
    };
    let (edge, edge_cache) = if cfg.edge_bias {
        let (e, c) = edge_bias(&phi, n, &params.edge);
        (e, Some(c))
    } else {
        (vec![Array2::zeros((n, n)); heads], None)
    };
    let slopes = params.slopes();
    let gates: Vec<f64> = (0..heads)
        .map(|h| {
            if cfg.gate {
                sigmoid(params.gate_scale[(0, h)] * c_noise + params.gate_bias[(0, h)])
            } else {
                1.0
            }
        })
        .collect();
    let mut bias = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut b = Array2::zeros((n + 1, n + 1));
        let mut atom = b.slice_mut(s![..n, ..n]);
        if cfg.distance_bias {
            atom.scaled_add(slopes[h], &dbar);
        }
        if cfg.edge_bias {
            atom += &edge[h];
        }
        atom *= gates[h];
        bias.push(b);
    }
    let cache = GemCache { n, dbar, phi, edge_cache, edge, gates, c_noise };
    (bias, cache)
}

/// Accumulate parameter gradients given `dL/dbias` (same layout as [`gem_bias`]).
pub fn gem_bias_backward(dbias: &[Array2<f64>], cache: &GemCache, params: &GemParams, cfg: &GemConfig, grad: &mut GemParams) {
    let n = cache.n;
    let heads = cfg.num_heads;
    let slopes = params.slopes();
    let mut dedge = Array2::zeros((n * n, heads));
    for h in 0..heads {
        let db = dbias[h].slice(s![..n, ..n]);
        let g = cache.gates[h];
        let mut inner = 0.0;
        if cfg.distance_bias {
            let dd: f64 = (&db * &cache.dbar).sum();
            inner += slopes[h] * dd;
            grad.slope_raw[(0, h)] += g * dd * -sigmoid(params.slope_raw[(0, h)]);
        }
        if cfg.edge_bias {
            inner += (&db * &cache.edge[h]).sum();
            for i in 0..n {
                for j in 0..n {
                    dedge[(i * n + j, h)] = g * db[(i, j)];
                }
            }
        }
        if cfg.gate {
            let dpre = inner * g * (1.0 - g);
            grad.gate_scale[(0, h)] += dpre * cache.c_noise;
            grad.gate_bias[(0, h)] += dpre;
        }
    }
    if let Some(ec) = &cache.edge_cache {
        params
            .edge
            .backward_params(&cache.phi.view(), ec, &dedge.view(), &mut grad.edge);
    }
}

/// Cached forward values of multi-head attention.
#[derive(Debug, Clone)]
pub struct AttnCache {
    pub probs: Vec<Array2<f64>>,
}

/// Per head: `softmax(q kᵀ/√d_head + bias_h) v`, heads concatenated.
pub fn biased_attention(
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
    bias: Option<&[Array2<f64>]>,
    heads: usize,
) -> (Array2<f64>, AttnCache) {
    let (t, d) = (q.nrows(), q.ncols());
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((t, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut logits = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        if let Some(b) = bias {
            logits += &b[h];
        }
        softmax_rows(&mut logits);
        out.slice_mut(cols).assign(&logits.dot(&v.slice(cols)));
        probs.push(logits);
    }
    (out, AttnCache { probs })
}

/// Returns `(dq, dk, dv, dbias)`.
pub fn biased_attention_backward(
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
    cache: &AttnCache,
    dout: &ArrayView2<f64>,
    heads: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>, Vec<Array2<f64>>) {
    let (t, d) = (q.nrows(), q.ncols());
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros((t, d));
    let mut dk = Array2::zeros((t, d));
    let mut dv = Array2::zeros((t, d));
    let mut dbias = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = &cache.probs[h];
        let dout_h = dout.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&dout_h));
        let dp = dout_h.dot(&v.slice(cols).t());
        let mut ds = Array2::zeros((t, t));
        for i in 0..t {
            let row_dot: f64 = (0..t).map(|j| dp[(i, j)] * p[(i, j)]).sum();
            for j in 0..t {
                ds[(i, j)] = p[(i, j)] * (dp[(i, j)] - row_dot);
            }
        }
        dq.slice_mut(cols).assign(&(ds.dot(&k.slice(cols)) * scale));
        dk.slice_mut(cols).assign(&(ds.t().dot(&q.slice(cols)) * scale));
        dbias.push(ds);
    }
    (dq, dk, dv, dbias)
}
