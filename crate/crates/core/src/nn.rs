//! Small dense layers with hand-written backward passes.
//!
//! Everything is `f64`, row-major, one token per row. Biases are stored as
//! `1 × out` matrices so every parameter is an `Array2`.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

/// Visit named parameter tensors in a fixed order.
pub trait Tensors {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>);

    fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut v = Vec::new();
        self.visit("", &mut v);
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut v = Vec::new();
        self.visit_mut("", &mut v);
        v
    }

    fn fill_zero(&mut self) {
        for (_, t) in self.named_mut() {
            t.fill(0.0);
        }
    }

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Normal(0, std) truncated to ±2 std.
pub fn trunc_normal<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    })
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in × out`
    pub w: Array2<f64>,
    /// `1 × out`
    pub b: Array2<f64>,
}

impl Linear {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w: trunc_normal(input, output, INIT_STD, rng),
            b: Array2::zeros((1, output)),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((input, output)),
            b: Array2::zeros((1, output)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &ArrayView2<f64>, dy: &ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.t())
    }

    /// Parameter gradients only, for inputs that are constants.
    pub fn backward_params(&self, x: &ArrayView2<f64>, dy: &ArrayView2<f64>, grad: &mut Linear) {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
}

impl Tensors for Linear {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        out.push((join(prefix, "w"), &self.w));
        out.push((join(prefix, "b"), &self.b));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        out.push((join(prefix, "w"), &mut self.w));
        out.push((join(prefix, "b"), &mut self.b));
    }
}

/// `Linear → SiLU → Linear`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    pub pre: Array2<f64>,
    pub act: Array2<f64>,
}

impl Mlp {
    pub fn new<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::new(input, hidden, rng),
            l2: Linear::new(hidden, output, rng),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let pre = self.l1.forward(x);
        let act = pre.mapv(silu);
        let y = self.l2.forward(&act.view());
        (y, MlpCache { pre, act })
    }

    pub fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        self.forward(x).0
    }

    fn hidden_grad(&self, cache: &MlpCache, dy: &ArrayView2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut da = self.l2.backward(&cache.act.view(), dy, &mut grad.l2);
        ndarray::Zip::from(&mut da)
            .and(&cache.pre)
            .for_each(|d, &p| *d *= silu_grad(p));
        da
    }

    pub fn backward(&self, x: &ArrayView2<f64>, cache: &MlpCache, dy: &ArrayView2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let dpre = self.hidden_grad(cache, dy, grad);
        self.l1.backward(x, &dpre.view(), &mut grad.l1)
    }

    pub fn backward_params(&self, x: &ArrayView2<f64>, cache: &MlpCache, dy: &ArrayView2<f64>, grad: &mut Mlp) {
        let dpre = self.hidden_grad(cache, dy, grad);
        self.l1.backward_params(x, &dpre.view(), &mut grad.l1);
    }
}

impl Tensors for Mlp {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        self.l1.visit(&join(prefix, "l1"), out);
        self.l2.visit(&join(prefix, "l2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        self.l1.visit_mut(&join(prefix, "l1"), out);
        self.l2.visit_mut(&join(prefix, "l2"), out);
    }
}

/// Row-wise layer norm without affine parameters. Returns the normalized rows and `1/std` per row.
pub fn layer_norm(x: &ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let d = x.ncols() as f64;
    let mut y = x.to_owned();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in y.rows_mut() {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * r);
        inv.push(r);
    }
    (y, inv)
}

pub fn layer_norm_backward(y: &ArrayView2<f64>, inv: &[f64], dy: &ArrayView2<f64>) -> Array2<f64> {
    let d = y.ncols() as f64;
    let mut dx = Array2::zeros(y.raw_dim());
    for i in 0..y.nrows() {
        let (yr, gr) = (y.row(i), dy.row(i));
        let mean_g = gr.sum() / d;
        let mean_gy = yr.dot(&gr) / d;
        for k in 0..y.ncols() {
            dx[(i, k)] = inv[i] * (gr[k] - mean_g - yr[k] * mean_gy);
        }
    }
    dx
}

/// In-place row softmax.
pub fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

/// `[sin(2πℓv), cos(2πℓv)]` for `ℓ = 1..=freqs` on every column of `x`.
/// Column layout: for each input column `c`, `freqs` sines then `freqs` cosines.
pub fn fourier_features(x: &ArrayView2<f64>, freqs: usize) -> Array2<f64> {
    let cols = x.ncols();
    let mut out = Array2::zeros((x.nrows(), cols * 2 * freqs));
    for i in 0..x.nrows() {
        for c in 0..cols {
            let base = c * 2 * freqs;
            for l in 0..freqs {
                let a = std::f64::consts::TAU * (l + 1) as f64 * x[(i, c)];
                out[(i, base + l)] = a.sin();
                out[(i, base + freqs + l)] = a.cos();
            }
        }
    }
    out
}
