//! Transformer denoiser over `[atom tokens…, lattice token]` with AdaLN-Zero
//! conditioning on the noise level, optional geometry bias, and shallow heads.
//! Forward keeps a cache so the backward pass can be written out by hand.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edm::{precondition, EdmConfig, NoisyState, RawOutput};
use crate::error::{Error, Result};
use crate::gem::{biased_attention, biased_attention_backward, gem_bias, gem_bias_backward, AttnCache, GemCache, GemConfig, GemParams};
use crate::nn::{fourier_features, layer_norm, layer_norm_backward, silu, silu_grad, Linear, Mlp, MlpCache, Tensors};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_h: usize,
    pub coord_freqs: usize,
    pub mlp_ratio: usize,
    pub gem: GemConfig,
}

impl Default for ModelConfig {
    /// Toy profile.
    fn default() -> Self {
        Self {
            width: 64,
            layers: 3,
            heads: 4,
            d_h: 16,
            coord_freqs: 32,
            mlp_ratio: 4,
            gem: GemConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Full-size profile (not trained here).
    pub fn full_scale() -> Self {
        Self {
            width: 512,
            layers: 14,
            heads: 16,
            gem: GemConfig { num_heads: 16, ..GemConfig::default() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.layers == 0 || self.d_h == 0 || self.coord_freqs == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("layers, d_h, coord_freqs and mlp_ratio must be positive".into()));
        }
        if self.gem.enabled {
            self.gem.validate()?;
            if self.gem.num_heads != self.heads {
                return Err(Error::Config(format!(
                    "GEM heads ({}) must equal attention heads ({})",
                    self.gem.num_heads, self.heads
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    /// `d → 6d`: shift, scale, gate for attention then for the feed-forward.
    pub ada: Linear,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Tensors for BlockParams {
    fn visit<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        self.ada.visit(&format!("{p}.ada"), out);
        self.q.visit(&format!("{p}.q"), out);
        self.k.visit(&format!("{p}.k"), out);
        self.v.visit(&format!("{p}.v"), out);
        self.o.visit(&format!("{p}.o"), out);
        self.ff1.visit(&format!("{p}.ff1"), out);
        self.ff2.visit(&format!("{p}.ff2"), out);
    }

    fn visit_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        self.ada.visit_mut(&format!("{p}.ada"), out);
        self.q.visit_mut(&format!("{p}.q"), out);
        self.k.visit_mut(&format!("{p}.k"), out);
        self.v.visit_mut(&format!("{p}.v"), out);
        self.o.visit_mut(&format!("{p}.o"), out);
        self.ff1.visit_mut(&format!("{p}.ff1"), out);
        self.ff2.visit_mut(&format!("{p}.ff2"), out);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub e_h: Mlp,
    pub e_f: Mlp,
    pub e_lat: Mlp,
    pub e_sigma: Mlp,
    pub blocks: Vec<BlockParams>,
    pub gem: Option<GemParams>,
    pub head_h: Linear,
    pub head_f: Linear,
    pub head_lat: Linear,
}

impl Params {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.width;
        let e_h = Mlp::new(cfg.d_h, d, d, &mut rng);
        let e_f = Mlp::new(6 * cfg.coord_freqs, d, d, &mut rng);
        let e_lat = Mlp::new(6, d, d, &mut rng);
        let e_sigma = Mlp::new(1, d, d, &mut rng);
        let blocks = (0..cfg.layers)
            .map(|_| BlockParams {
                ada: Linear::zeros(d, 6 * d),
                q: Linear::new(d, d, &mut rng),
                k: Linear::new(d, d, &mut rng),
                v: Linear::new(d, d, &mut rng),
                o: Linear::new(d, d, &mut rng),
                ff1: Linear::new(d, cfg.mlp_ratio * d, &mut rng),
                ff2: Linear::new(cfg.mlp_ratio * d, d, &mut rng),
            })
            .collect();
        let gem = cfg.gem.enabled.then(|| GemParams::new(&cfg.gem, &mut rng));
        Self {
            e_h,
            e_f,
            e_lat,
            e_sigma,
            blocks,
            gem,
            head_h: Linear::zeros(d, cfg.d_h),
            head_f: Linear::zeros(d, 3),
            head_lat: Linear::zeros(d, 6),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }
}

impl Tensors for Params {
    fn visit<'a>(&'a self, _p: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        self.e_h.visit("e_h", out);
        self.e_f.visit("e_f", out);
        self.e_lat.visit("e_lat", out);
        self.e_sigma.visit("e_sigma", out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("block{i}"), out);
        }
        if let Some(g) = &self.gem {
            g.visit("gem", out);
        }
        self.head_h.visit("head_h", out);
        self.head_f.visit("head_f", out);
        self.head_lat.visit("head_lat", out);
    }

    fn visit_mut<'a>(&'a mut self, _p: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        self.e_h.visit_mut("e_h", out);
        self.e_f.visit_mut("e_f", out);
        self.e_lat.visit_mut("e_lat", out);
        self.e_sigma.visit_mut("e_sigma", out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("block{i}"), out);
        }
        if let Some(g) = &mut self.gem {
            g.visit_mut("gem", out);
        }
        self.head_h.visit_mut("head_h", out);
        self.head_f.visit_mut("head_f", out);
        self.head_lat.visit_mut("head_lat", out);
    }
}

struct BlockCache {
    n1: Array2<f64>,
    inv1: Vec<f64>,
    x1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: AttnCache,
    att: Array2<f64>,
    a: Array2<f64>,
    n2: Array2<f64>,
    inv2: Vec<f64>,
    x2: Array2<f64>,
    h1: Array2<f64>,
    a1: Array2<f64>,
    m2: Array2<f64>,
    modv: Array2<f64>,
}

pub struct ForwardCache {
    n: usize,
    xh: Array2<f64>,
    eh: MlpCache,
    gf: Array2<f64>,
    ef: MlpCache,
    xl: Array2<f64>,
    el: MlpCache,
    sig_in: Array2<f64>,
    es: MlpCache,
    c_sigma: Array2<f64>,
    sc: Array2<f64>,
    gem: Option<GemCache>,
    bias: Option<Vec<Array2<f64>>>,
    blocks: Vec<BlockCache>,
    z: Array2<f64>,
    zinv: Vec<f64>,
}

fn mod_slice(m: &Array2<f64>, d: usize, k: usize) -> ArrayView2<'_, f64> {
    m.slice(s![.., k * d..(k + 1) * d])
}

fn block_forward(
    p: &BlockParams,
    t: &Array2<f64>,
    sc: &Array2<f64>,
    bias: Option<&[Array2<f64>]>,
    heads: usize,
) -> (Array2<f64>, BlockCache) {
    let d = t.ncols();
    let modv = p.ada.forward(&sc.view());
    let (shift1, scale1, gate1) = (mod_slice(&modv, d, 0), mod_slice(&modv, d, 1), mod_slice(&modv, d, 2));
    let (shift2, scale2, gate2) = (mod_slice(&modv, d, 3), mod_slice(&modv, d, 4), mod_slice(&modv, d, 5));

    let (n1, inv1) = layer_norm(&t.view());
    let x1 = &n1 * &scale1.mapv(|v| 1.0 + v) + &shift1;
    let q = p.q.forward(&x1.view());
    let k = p.k.forward(&x1.view());
    let v = p.v.forward(&x1.view());
    let (att, attn) = biased_attention(&q.view(), &k.view(), &v.view(), bias, heads);
    let a = p.o.forward(&att.view());
    let t1 = t + &(&a * &gate1);

    let (n2, inv2) = layer_norm(&t1.view());
    let x2 = &n2 * &scale2.mapv(|v| 1.0 + v) + &shift2;
    let h1 = p.ff1.forward(&x2.view());
    let a1 = h1.mapv(silu);
    let m2 = p.ff2.forward(&a1.view());
    let t2 = &t1 + &(&m2 * &gate2);
    let cache = BlockCache {
        n1,
        inv1,
        x1,
        q,
        k,
        v,
        attn,
        att,
        a,
        n2,
        inv2,
        x2,
        h1,
        a1,
        m2,
        modv,
    };
    (t2, cache)
}

fn col_sum(x: &Array2<f64>) -> Array2<f64> {
    x.sum_axis(Axis(0)).insert_axis(Axis(0))
}

/// Returns `(dT_in, dsc, dbias)`.
fn block_backward(
    p: &BlockParams,
    c: &BlockCache,
    sc: &Array2<f64>,
    dt2: &Array2<f64>,
    heads: usize,
    g: &mut BlockParams,
) -> (Array2<f64>, Array2<f64>, Vec<Array2<f64>>) {
    let d = dt2.ncols();
    let modv = &c.modv;
    let (scale1, gate1) = (mod_slice(modv, d, 1), mod_slice(modv, d, 2));
    let (scale2, gate2) = (mod_slice(modv, d, 4), mod_slice(modv, d, 5));
    let mut dmod = Array2::zeros((1, 6 * d));

    // feed-forward branch
    let dgate2 = col_sum(&(dt2 * &c.m2));
    let dm2 = dt2 * &gate2;
    let mut da1 = p.ff2.backward(&c.a1.view(), &dm2.view(), &mut g.ff2);
    ndarray::Zip::from(&mut da1).and(&c.h1).for_each(|x, &h| *x *= silu_grad(h));
    let dx2 = p.ff1.backward(&c.x2.view(), &da1.view(), &mut g.ff1);
    let dscale2 = col_sum(&(&dx2 * &c.n2));
    let dshift2 = col_sum(&dx2);
    let dn2 = &dx2 * &scale2.mapv(|v| 1.0 + v);
    let dt1 = dt2 + &layer_norm_backward(&c.n2.view(), &c.inv2, &dn2.view());

    // attention branch
    let dgate1 = col_sum(&(&dt1 * &c.a));
    let da = &dt1 * &gate1;
    let datt = p.o.backward(&c.att.view(), &da.view(), &mut g.o);
    let (dq, dk, dv, dbias) = biased_attention_backward(&c.q.view(), &c.k.view(), &c.v.view(), &c.attn, &datt.view(), heads);
    let mut dx1 = p.q.backward(&c.x1.view(), &dq.view(), &mut g.q);
    dx1 += &p.k.backward(&c.x1.view(), &dk.view(), &mut g.k);
    dx1 += &p.v.backward(&c.x1.view(), &dv.view(), &mut g.v);
    let dscale1 = col_sum(&(&dx1 * &c.n1));
    let dshift1 = col_sum(&dx1);
    let dn1 = &dx1 * &scale1.mapv(|v| 1.0 + v);
    let dt = &dt1 + &layer_norm_backward(&c.n1.view(), &c.inv1, &dn1.view());

    for (k, part) in [dshift1, dscale1, dgate1, dshift2, dscale2, dgate2].iter().enumerate() {
        dmod.slice_mut(s![.., k * d..(k + 1) * d]).assign(part);
    }
    let dsc = p.ada.backward(&sc.view(), &dmod.view(), &mut g.ada);
    (dt, dsc, dbias)
}

fn check_finite(x: &Array2<f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Network evaluation on a noisy state. Inputs are preconditioned here:
/// tokens and lattice latent are scaled by `c_in`, coordinates are passed wrapped.
pub fn forward(
    state: &NoisyState,
    params: &Params,
    cfg: &ModelConfig,
    edm: &EdmConfig,
) -> Result<(RawOutput, ForwardCache)> {
    let n = state.num_atoms();
    let sigma = state.sigma;
    let ph = precondition(sigma, edm.sigma_data_h);
    let pl = precondition(sigma, edm.sigma_data_lat);
    let c_noise = ph.c_noise;

    let xh = &state.h * state.token_c_in(edm.sigma_data_h);
    let (eh, eh_cache) = params.e_h.forward(&xh.view());
    let gf = fourier_features(&state.f_in.view(), cfg.coord_freqs);
    let (ef, ef_cache) = params.e_f.forward(&gf.view());
    let xl = Array2::from_shape_fn((1, 6), |(_, k)| state.y[k] * pl.c_in);
    let (el, el_cache) = params.e_lat.forward(&xl.view());
    let atoms = &eh + &ef;
    let mut t = concatenate(Axis(0), &[atoms.view(), el.view()]).expect("token rows share width");

    let sig_in = Array2::from_elem((1, 1), c_noise);
    let (c_sigma, es_cache) = params.e_sigma.forward(&sig_in.view());
    let sc = c_sigma.mapv(silu);

    let (bias, gem_cache) = match (&params.gem, cfg.gem.enabled) {
        (Some(gp), true) => {
            let (b, c) = gem_bias(&state.f_in.view(), &state.y, c_noise, gp, &cfg.gem);
            (Some(b), Some(c))
        }
        _ => (None, None),
    };

    let mut blocks = Vec::with_capacity(params.blocks.len());
    for (i, bp) in params.blocks.iter().enumerate() {
        let (next, cache) = block_forward(bp, &t, &sc, bias.as_deref(), cfg.heads);
        check_finite(&next, &format!("block {i}"))?;
        t = next;
        blocks.push(cache);
    }

    let (z, zinv) = layer_norm(&t.view());
    let za = z.slice(s![..n, ..]);
    let zl = z.slice(s![n.., ..]);
    let rh = params.head_h.forward(&za);
    let rf = params.head_f.forward(&za);
    let rl = params.head_lat.forward(&zl);
    check_finite(&rh, "output heads")?;
    let mut y = [0.0; 6];
    for k in 0..6 {
        y[k] = rl[(0, k)];
    }
    let raw = RawOutput { h: rh, f: rf, y };
    let cache = ForwardCache {
        n,
        xh,
        eh: eh_cache,
        gf,
        ef: ef_cache,
        xl,
        el: el_cache,
        sig_in,
        es: es_cache,
        c_sigma,
        sc,
        gem: gem_cache,
        bias,
        blocks,
        z,
        zinv,
    };
    Ok((raw, cache))
}

/// Accumulate parameter gradients for upstream gradient `draw` on the raw outputs.
pub fn backward(draw: &RawOutput, cache: &ForwardCache, params: &Params, cfg: &ModelConfig, grads: &mut Params) {
    let n = cache.n;
    let d = cfg.width;
    let z = &cache.z;
    let za = z.slice(s![..n, ..]);
    let zl = z.slice(s![n.., ..]);
    let mut dz = Array2::zeros((n + 1, d));
    {
        let mut dza = params.head_h.backward(&za, &draw.h.view(), &mut grads.head_h);
        dza += &params.head_f.backward(&za, &draw.f.view(), &mut grads.head_f);
        dz.slice_mut(s![..n, ..]).assign(&dza);
        let dyl = Array2::from_shape_fn((1, 6), |(_, k)| draw.y[k]);
        let dzl = params.head_lat.backward(&zl, &dyl.view(), &mut grads.head_lat);
        dz.slice_mut(s![n.., ..]).assign(&dzl);
    }
    let mut dt = layer_norm_backward(&z.view(), &cache.zinv, &dz.view());

    let mut dsc = Array2::zeros((1, d));
    let mut dbias_total: Option<Vec<Array2<f64>>> = cache.bias.as_ref().map(|b| b.iter().map(|m| Array2::zeros(m.raw_dim())).collect());
    for (i, bp) in params.blocks.iter().enumerate().rev() {
        let (dprev, dsc_i, dbias) = block_backward(bp, &cache.blocks[i], &cache.sc, &dt, cfg.heads, &mut grads.blocks[i]);
        dsc += &dsc_i;
        if let Some(tot) = dbias_total.as_mut() {
            for (t, b) in tot.iter_mut().zip(&dbias) {
                *t += b;
            }
        }
        dt = dprev;
    }

    if let (Some(gp), Some(gc), Some(db), Some(gg)) = (&params.gem, &cache.gem, &dbias_total, grads.gem.as_mut()) {
        gem_bias_backward(db, gc, gp, &cfg.gem, gg);
    }

    let mut dcs = dsc;
    ndarray::Zip::from(&mut dcs).and(&cache.c_sigma).for_each(|g, &c| *g *= silu_grad(c));
    params.e_sigma.backward_params(&cache.sig_in.view(), &cache.es, &dcs.view(), &mut grads.e_sigma);

    let datoms = dt.slice(s![..n, ..]);
    params.e_h.backward_params(&cache.xh.view(), &cache.eh, &datoms, &mut grads.e_h);
    params.e_f.backward_params(&cache.gf.view(), &cache.ef, &datoms, &mut grads.e_f);
    params.e_lat.backward_params(&cache.xl.view(), &cache.el, &dt.slice(s![n.., ..]), &mut grads.e_lat);
}

/// Embedded atom tokens `E_H(h) + E_F(γ_F(f))` (without preconditioning), for inspection.
pub fn embed_atoms(h: &ArrayView2<f64>, f: &ArrayView2<f64>, params: &Params, cfg: &ModelConfig) -> Array2<f64> {
    params.e_h.apply(h) + &params.e_f.apply(&fourier_features(f, cfg.coord_freqs).view())
}

pub fn embed_lattice(y: &[f64; 6], params: &Params) -> Array2<f64> {
    let x = Array2::from_shape_fn((1, 6), |(_, k)| y[k]);
    params.e_lat.apply(&x.view())
}

/// A network with its configuration: the object sampled from and trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub cfg: ModelConfig,
    pub edm: EdmConfig,
    pub params: Params,
}

impl Model {
    pub fn new(cfg: ModelConfig, edm: EdmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        edm.validate()?;
        let params = Params::init(&cfg, seed);
        Ok(Self { cfg, edm, params })
    }

    pub fn raw(&self, state: &NoisyState) -> Result<RawOutput> {
        Ok(forward(state, &self.params, &self.cfg, &self.edm)?.0)
    }
}
