//! Layer primitives with explicit forward caches and hand-written backward
//! passes. Every parameter tensor is a 2-D matrix; biases are `1 x n` rows
//! and broadcast over the sequence dimension.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::rng::StreamRng;
use crate::timeseries::Matrix;

/// Collects parameter tensors in a fixed order. The same order is used for
/// the optimizer state, gradients and checkpoints.
pub(crate) trait Params {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>);
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>);
}

pub(crate) fn uniform_init(rows: usize, cols: usize, bound: f64, rng: &mut StreamRng) -> Matrix {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Matrix,
    pub b: Matrix,
}

impl Linear {
    pub(crate) fn new(fan_in: usize, fan_out: usize, rng: &mut StreamRng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: uniform_init(fan_in, fan_out, bound, rng),
            b: Array2::zeros((1, fan_out)),
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array2::zeros(self.b.raw_dim()),
        }
    }

    pub(crate) fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates weight gradients into `g` and returns `dL/dx`.
    pub(crate) fn backward(&self, x: &Matrix, dy: &Matrix, g: &mut Linear) -> Matrix {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut g.w);
        g.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl Params for Linear {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
}

pub(crate) struct LayerNormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub(crate) fn new(d: usize) -> Self {
        Self {
            gamma: Array2::ones((1, d)),
            beta: Array2::zeros((1, d)),
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            gamma: Array2::zeros(self.gamma.raw_dim()),
            beta: Array2::zeros(self.beta.raw_dim()),
        }
    }

    pub(crate) fn forward(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub(crate) fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Matrix,
        g: &mut LayerNorm,
    ) -> Matrix {
        g.gamma += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        g.beta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (i, (mut out, (dxh, xh))) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows().into_iter().zip(cache.xhat.rows()))
            .enumerate()
        {
            let sum_d = dxh.sum();
            let sum_dx = dxh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>();
            let is = cache.inv_std[i];
            for j in 0..out.len() {
                out[j] = is / d * (d * dxh[j] - sum_d - xh[j] * sum_dx);
            }
        }
        dx
    }
}

impl Params for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

/// Inverted dropout. `None` means the identity (eval mode or `p == 0`).
pub(crate) type DropMask = Option<Matrix>;

pub(crate) fn dropout(x: Matrix, p: f64, rng: Option<&mut StreamRng>) -> (Matrix, DropMask) {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let mask = Array2::from_shape_fn(x.raw_dim(), |_| {
                if rng.random::<f64>() < p {
                    0.0
                } else {
                    keep
                }
            });
            (x * &mask, Some(mask))
        }
        _ => (x, None),
    }
}

pub(crate) fn dropout_backward(dy: Matrix, mask: &DropMask) -> Matrix {
    match mask {
        Some(m) => dy * m,
        None => dy,
    }
}

fn softmax_rows(m: &mut Matrix) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs (self-attention passes the same matrix twice).
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

pub(crate) struct AttentionCache {
    xq: Matrix,
    xkv: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    ctx: Matrix,
}

impl Attention {
    pub(crate) fn new(d_model: usize, n_heads: usize, rng: &mut StreamRng) -> Self {
        Self {
            q: Linear::new(d_model, d_model, rng),
            k: Linear::new(d_model, d_model, rng),
            v: Linear::new(d_model, d_model, rng),
            o: Linear::new(d_model, d_model, rng),
            n_heads,
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            q: self.q.zeros_like(),
            k: self.k.zeros_like(),
            v: self.v.zeros_like(),
            o: self.o.zeros_like(),
            n_heads: self.n_heads,
        }
    }

    pub(crate) fn forward(&self, xq: &Matrix, xkv: &Matrix) -> (Matrix, AttentionCache) {
        let q = self.q.forward(xq);
        let k = self.k.forward(xkv);
        let v = self.v.forward(xkv);
        let d = q.ncols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Array2::zeros((q.nrows(), d));
        let mut probs = Vec::with_capacity(self.n_heads);
        for head in 0..self.n_heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let mut p = q.slice(cols).dot(&k.slice(cols).t());
            p *= scale;
            softmax_rows(&mut p);
            ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let out = self.o.forward(&ctx);
        let cache = AttentionCache {
            xq: xq.clone(),
            xkv: xkv.clone(),
            q,
            k,
            v,
            probs,
            ctx,
        };
        (out, cache)
    }

    /// Returns `(dL/dxq, dL/dxkv)`.
    pub(crate) fn backward(
        &self,
        c: &AttentionCache,
        dout: &Matrix,
        g: &mut Attention,
    ) -> (Matrix, Matrix) {
        let dctx = self.o.backward(&c.ctx, dout, &mut g.o);
        let d = c.q.ncols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (head, p) in c.probs.iter().enumerate() {
            let cols = s![.., head * dh..(head + 1) * dh];
            let dctx_h = dctx.slice(cols);
            let dp = dctx_h.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
            // softmax Jacobian, row-wise
            let mut ds = &dp * p;
            for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot: f64 = ds_row.sum();
                ds_row.zip_mut_with(&p_row, |a, &pv| *a -= pv * dot);
            }
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let dxq = self.q.backward(&c.xq, &dq, &mut g.q);
        let mut dxkv = self.k.backward(&c.xkv, &dk, &mut g.k);
        dxkv += &self.v.backward(&c.xkv, &dv, &mut g.v);
        (dxq, dxkv)
    }
}

impl Params for Attention {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        self.q.visit(&format!("{prefix}.q"), out);
        self.k.visit(&format!("{prefix}.k"), out);
        self.v.visit(&format!("{prefix}.v"), out);
        self.o.visit(&format!("{prefix}.o"), out);
    }
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        self.q.visit_mut(out);
        self.k.visit_mut(out);
        self.v.visit_mut(out);
        self.o.visit_mut(out);
    }
}

/// Position-wise `Linear -> ReLU -> dropout -> Linear`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

pub(crate) struct FeedForwardCache {
    x: Matrix,
    pre: Matrix,
    hidden: Matrix,
    mask: DropMask,
}

impl FeedForward {
    pub(crate) fn new(d_model: usize, d_ff: usize, rng: &mut StreamRng) -> Self {
        Self {
            l1: Linear::new(d_model, d_ff, rng),
            l2: Linear::new(d_ff, d_model, rng),
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            l1: self.l1.zeros_like(),
            l2: self.l2.zeros_like(),
        }
    }

    pub(crate) fn forward(
        &self,
        x: &Matrix,
        p: f64,
        rng: Option<&mut StreamRng>,
    ) -> (Matrix, FeedForwardCache) {
        let pre = self.l1.forward(x);
        let act = pre.mapv(|v| v.max(0.0));
        let (hidden, mask) = dropout(act, p, rng);
        let out = self.l2.forward(&hidden);
        let cache = FeedForwardCache {
            x: x.clone(),
            pre,
            hidden,
            mask,
        };
        (out, cache)
    }

    pub(crate) fn backward(
        &self,
        c: &FeedForwardCache,
        dy: &Matrix,
        g: &mut FeedForward,
    ) -> Matrix {
        let dh = self.l2.backward(&c.hidden, dy, &mut g.l2);
        let mut dpre = dropout_backward(dh, &c.mask);
        dpre.zip_mut_with(&c.pre, |d, &p| {
            if p <= 0.0 {
                *d = 0.0
            }
        });
        self.l1.backward(&c.x, &dpre, &mut g.l1)
    }
}

impl Params for FeedForward {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        self.l1.visit(&format!("{prefix}.l1"), out);
        self.l2.visit(&format!("{prefix}.l2"), out);
    }
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        self.l1.visit_mut(out);
        self.l2.visit_mut(out);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Fixed sinusoidal encodings for positions `start..start + len`.
pub(crate) fn positional_encoding(start: usize, len: usize, d: usize) -> Matrix {
    Array2::from_shape_fn((len, d), |(i, j)| {
        let pos = (start + i) as f64;
        let rate = 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        if j % 2 == 0 {
            (pos / rate).sin()
        } else {
            (pos / rate).cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn fd_check<F: Fn(&Matrix) -> f64>(f: F, x: &Matrix, analytic: &Matrix) {
        let eps = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            xp[[r, c]] += eps;
            xm[[r, c]] -= eps;
            let num = (f(&xp) - f(&xm)) / (2.0 * eps);
            let a = analytic[[r, c]];
            assert!(
                (num - a).abs() <= 1e-6 * (1.0 + num.abs().max(a.abs())),
                "idx {idx}: numeric {num} vs analytic {a}"
            );
        }
    }

    // weighted sum makes every output element matter to the scalar loss
    fn weights(rows: usize, cols: usize) -> Matrix {
        Array2::from_shape_fn((rows, cols), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 1.7)
    }

    #[test]
    fn layer_norm_backward_matches_fd() {
        let mut rng = stream(1, "t", &[]);
        let mut ln = LayerNorm::new(6);
        ln.gamma = uniform_init(1, 6, 1.0, &mut rng);
        ln.beta = uniform_init(1, 6, 1.0, &mut rng);
        let x = uniform_init(4, 6, 2.0, &mut rng);
        let wts = weights(4, 6);
        let mut g = ln.zeros_like();
        let (_, cache) = ln.forward(&x);
        let dx = ln.backward(&cache, &wts, &mut g);
        fd_check(|x| (&ln.forward(x).0 * &wts).sum(), &x, &dx);
    }

    #[test]
    fn attention_backward_matches_fd() {
        let mut rng = stream(2, "t", &[]);
        let att = Attention::new(8, 2, &mut rng);
        let xq = uniform_init(3, 8, 1.0, &mut rng);
        let xkv = uniform_init(5, 8, 1.0, &mut rng);
        let wts = weights(3, 8);
        let mut g = att.zeros_like();
        let (_, cache) = att.forward(&xq, &xkv);
        let (dxq, dxkv) = att.backward(&cache, &wts, &mut g);
        fd_check(|x| (&att.forward(x, &xkv).0 * &wts).sum(), &xq, &dxq);
        fd_check(|x| (&att.forward(&xq, x).0 * &wts).sum(), &xkv, &dxkv);
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0, -0.5, 0.0, 0.3, 2.5] {
            let num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut rng = stream(3, "t", &[]);
        let x = uniform_init(3, 4, 1.0, &mut rng);
        let (y, mask) = dropout(x.clone(), 0.0, Some(&mut rng));
        assert_eq!(x, y);
        assert!(mask.is_none());
    }

    #[test]
    fn positional_encoding_first_row() {
        let pe = positional_encoding(0, 2, 4);
        assert_eq!(pe.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0]);
        assert!((pe[[1, 0]] - 1f64.sin()).abs() < 1e-15);
    }
}
