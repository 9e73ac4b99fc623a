//! Frame encoder, predictor and projector with hand-written reverse-mode
//! gradients.
//!
//! The encoder is a small CRNN: `3x3` convolutions with ReLU and average
//! pooling, followed by one bidirectional GRU layer. Parameters live in a
//! single flat `f64` vector so that EMA, Adam and checkpoints operate on
//! plain slices.
//!
//! Activations use a `[time][freq][channel]` layout throughout, so the
//! output of the last conv block is already a `T' x (F_last * C)` matrix.

mod ema;
mod linalg;
mod optim;

pub use ema::ModelPair;
pub use optim::Adam;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use linalg::{add_col_sums, add_row_bias, gemm, sigmoid, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub filters: usize,
    pub time_pool: usize,
    pub freq_pool: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Input mel bands `F`.
    pub mel_bands: usize,
    pub conv_blocks: Vec<ConvBlock>,
    /// GRU hidden size per direction; the frame feature size is twice this.
    pub recurrent_hidden: usize,
    pub projector_hidden: usize,
    pub projection_dim: usize,
    pub classes: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            mel_bands: 128,
            conv_blocks: vec![
                ConvBlock { filters: 16, time_pool: 2, freq_pool: 4 },
                ConvBlock { filters: 32, time_pool: 2, freq_pool: 4 },
                ConvBlock { filters: 64, time_pool: 1, freq_pool: 8 },
            ],
            recurrent_hidden: 32,
            projector_hidden: 64,
            projection_dim: 32,
            classes: 10,
        }
    }
}

impl NetworkConfig {
    pub fn time_pool_total(&self) -> usize {
        self.conv_blocks.iter().map(|b| b.time_pool).product()
    }

    pub fn freq_pool_total(&self) -> usize {
        self.conv_blocks.iter().map(|b| b.freq_pool).product()
    }

    /// Frame feature size `D`.
    pub fn feature_dim(&self) -> usize {
        2 * self.recurrent_hidden
    }

    /// Output frames for `frames` input frames.
    pub fn output_frames(&self, frames: usize) -> usize {
        frames / self.time_pool_total()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.conv_blocks.is_empty() {
            return bad("at least one conv block is required");
        }
        if self.conv_blocks.iter().any(|b| b.filters == 0 || b.time_pool == 0 || b.freq_pool == 0) {
            return bad("conv filters and pool factors must be positive");
        }
        if self.mel_bands == 0 || self.mel_bands % self.freq_pool_total() != 0 {
            return bad("mel bands must be divisible by the product of frequency pools");
        }
        if self.recurrent_hidden == 0
            || self.projector_hidden == 0
            || self.projection_dim == 0
            || self.classes == 0
        {
            return bad("layer sizes must be positive");
        }
        Ok(())
    }

    fn recurrent_input(&self) -> usize {
        let last = self.conv_blocks.last().expect("validated");
        (self.mel_bands / self.freq_pool_total()) * last.filters
    }
}

#[derive(Debug, Clone, Copy)]
struct Span {
    offset: usize,
    len: usize,
}

impl Span {
    #[inline]
    fn of<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.len]
    }

    #[inline]
    fn of_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSpans {
    w: Span,
    b: Span,
    c_in: usize,
    c_out: usize,
}

#[derive(Debug, Clone, Copy)]
struct GruSpans {
    w_ih: Span,
    w_hh: Span,
    b_ih: Span,
    b_hh: Span,
}

#[derive(Debug, Clone, Copy)]
struct DenseSpans {
    w: Span,
    b: Span,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    conv: Vec<ConvSpans>,
    gru: [GruSpans; 2],
    predictor: DenseSpans,
    proj_hidden: DenseSpans,
    proj_out: DenseSpans,
    total: usize,
}

impl Layout {
    fn new(cfg: &NetworkConfig) -> Self {
        let mut next = 0usize;
        let mut alloc = |len: usize| {
            let s = Span { offset: next, len };
            next += len;
            s
        };
        let mut conv = Vec::new();
        let mut c_in = 1;
        for b in &cfg.conv_blocks {
            let w = alloc(9 * c_in * b.filters);
            let bias = alloc(b.filters);
            conv.push(ConvSpans { w, b: bias, c_in, c_out: b.filters });
            c_in = b.filters;
        }
        let (i, h) = (cfg.recurrent_input(), cfg.recurrent_hidden);
        let mut gru_dir = || GruSpans {
            w_ih: alloc(i * 3 * h),
            w_hh: alloc(h * 3 * h),
            b_ih: alloc(3 * h),
            b_hh: alloc(3 * h),
        };
        let gru = [gru_dir(), gru_dir()];
        let d = cfg.feature_dim();
        let mut dense = |fan_in: usize, fan_out: usize| DenseSpans {
            w: alloc(fan_in * fan_out),
            b: alloc(fan_out),
            fan_in,
            fan_out,
        };
        let predictor = dense(d, cfg.classes);
        let proj_hidden = dense(d, cfg.projector_hidden);
        let proj_out = dense(cfg.projector_hidden, cfg.projection_dim);
        Self { conv, gru, predictor, proj_hidden, proj_out, total: next }
    }
}

/// Per-frame outputs of one clip.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    /// `T' x D` encoder features.
    pub q: Matrix,
    /// `T' x M` class probabilities.
    pub p: Matrix,
    /// `T' x D'` unit-norm projections.
    pub v: Matrix,
}

struct ConvCache {
    /// im2col matrix of the block input.
    col: Vec<f64>,
    relu_out: Vec<f64>,
    t: usize,
    f: usize,
}

struct GruCache {
    /// Input sequence in processing order.
    x: Vec<f64>,
    h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
}

/// Intermediate values kept by [`Network::forward_train`] for the backward
/// pass.
pub struct ForwardCache {
    conv: Vec<ConvCache>,
    gru: [GruCache; 2],
    out: ForwardOutputs,
    proj_pre: Vec<f64>,
    proj_act: Vec<f64>,
    proj_norm: Vec<f64>,
}

impl ForwardCache {
    pub fn outputs(&self) -> &ForwardOutputs {
        &self.out
    }
}

/// The frame model `f`, `g`, `h` for a fixed configuration.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    layout: Layout,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        Ok(Self { config, layout })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// Uniform fan-in scaled initialization; biases start at zero except
    /// for the projector output.
    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.layout.total];
        let mut fill = |span: Span, bound: f64, p: &mut [f64]| {
            for v in span.of_mut(p) {
                *v = rng.random_range(-bound..bound);
            }
        };
        for c in &self.layout.conv {
            fill(c.w, (6.0 / (9 * c.c_in) as f64).sqrt(), &mut p);
        }
        let hb = 1.0 / (self.config.recurrent_hidden as f64).sqrt();
        for g in &self.layout.gru {
            fill(g.w_ih, hb, &mut p);
            fill(g.w_hh, hb, &mut p);
        }
        fill(self.layout.predictor.w, (1.0 / self.layout.predictor.fan_in as f64).sqrt(), &mut p);
        fill(self.layout.proj_hidden.w, (6.0 / self.layout.proj_hidden.fan_in as f64).sqrt(), &mut p);
        let out_bound = (3.0 / self.layout.proj_out.fan_in as f64).sqrt();
        fill(self.layout.proj_out.w, out_bound, &mut p);
        // a nonzero output bias keeps V defined when every hidden unit is off
        fill(self.layout.proj_out.b, out_bound, &mut p);
        p
    }

    fn check(&self, params: &[f64], x: &Matrix) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.layout.total,
                params.len()
            )));
        }
        if x.cols() != self.config.mel_bands {
            return Err(Error::Shape(format!(
                "expected {} mel bands, got {}",
                self.config.mel_bands,
                x.cols()
            )));
        }
        let tp = self.config.time_pool_total();
        if x.rows() == 0 || x.rows() % tp != 0 {
            return Err(Error::Shape(format!(
                "frame count {} is not a positive multiple of the time pooling {tp}",
                x.rows()
            )));
        }
        Ok(())
    }

    /// Inference forward pass.
    pub fn forward(&self, params: &[f64], x: &Matrix) -> Result<ForwardOutputs> {
        Ok(self.forward_train(params, x)?.out)
    }

    /// Forward pass keeping everything the backward pass needs.
    pub fn forward_train(&self, params: &[f64], x: &Matrix) -> Result<ForwardCache> {
        self.check(params, x)?;
        let mut act = x.as_slice().to_vec();
        let (mut t, mut f) = (x.rows(), x.cols());
        let mut conv = Vec::with_capacity(self.layout.conv.len());
        for (spans, block) in self.layout.conv.iter().zip(&self.config.conv_blocks) {
            let col = im2col(&act, t, f, spans.c_in);
            let relu_out = conv_relu(&col, t, f, spans, params);
            let pooled = avg_pool(&relu_out, t, f, spans.c_out, block.time_pool, block.freq_pool);
            conv.push(ConvCache { col, relu_out, t, f });
            act = pooled;
            t /= block.time_pool;
            f /= block.freq_pool;
        }
        let t_out = t;
        let input_dim = self.config.recurrent_input();
        let h = self.config.recurrent_hidden;

        let fwd = gru_forward(&act, t_out, input_dim, h, &self.layout.gru[0], params);
        let reversed = reverse_rows(&act, input_dim);
        let bwd = gru_forward(&reversed, t_out, input_dim, h, &self.layout.gru[1], params);

        let d = 2 * h;
        let mut q = vec![0.0; t_out * d];
        for k in 0..t_out {
            let row = &mut q[k * d..(k + 1) * d];
            row[..h].copy_from_slice(&fwd.h_out(k, h));
            row[h..].copy_from_slice(&bwd.h_out(t_out - 1 - k, h));
        }

        let pred = &self.layout.predictor;
        let mut logits = vec![0.0; t_out * pred.fan_out];
        dense(&q, t_out, pred, params, &mut logits);
        let p: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();

        let ph = &self.layout.proj_hidden;
        let mut proj_pre = vec![0.0; t_out * ph.fan_out];
        dense(&q, t_out, ph, params, &mut proj_pre);
        let proj_act: Vec<f64> = proj_pre.iter().map(|&v| v.max(0.0)).collect();
        let po = &self.layout.proj_out;
        let mut y = vec![0.0; t_out * po.fan_out];
        dense(&proj_act, t_out, po, params, &mut y);
        let mut proj_norm = vec![0.0; t_out];
        for (row, n) in y.chunks_exact_mut(po.fan_out).zip(proj_norm.iter_mut()) {
            // floor keeps an all-zero projection finite
            *n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= *n);
        }

        let out = ForwardOutputs {
            q: Matrix::from_vec(t_out, d, q)?,
            p: Matrix::from_vec(t_out, pred.fan_out, p)?,
            v: Matrix::from_vec(t_out, po.fan_out, y)?,
        };
        Ok(ForwardCache { conv, gru: [fwd, bwd], out, proj_pre, proj_act, proj_norm })
    }

    /// Accumulates into `grad` the parameter gradient of a loss whose
    /// gradients with respect to `P` and `V` are `d_p` and `d_v`.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ForwardCache,
        d_p: Option<&Matrix>,
        d_v: Option<&Matrix>,
        grad: &mut [f64],
    ) -> Result<()> {
        if grad.len() != self.layout.total || params.len() != self.layout.total {
            return Err(Error::Shape("gradient/parameter length mismatch".into()));
        }
        let out = &cache.out;
        for (name, g, like) in [("P", d_p, &out.p), ("V", d_v, &out.v)] {
            if let Some(g) = g {
                if !g.same_shape(like) {
                    return Err(Error::Shape(format!(
                        "upstream gradient for {name} is {:?}, expected {:?}",
                        g.shape(),
                        like.shape()
                    )));
                }
            }
        }
        let t_out = out.q.rows();
        let d = out.q.cols();
        let mut dq = vec![0.0; t_out * d];

        if let Some(dp) = d_p {
            let pred = &self.layout.predictor;
            let dlogits: Vec<f64> = dp
                .as_slice()
                .iter()
                .zip(out.p.as_slice())
                .map(|(g, p)| g * p * (1.0 - p))
                .collect();
            dense_backward(out.q.as_slice(), &dlogits, t_out, pred, params, grad, Some(&mut dq));
        }

        if let Some(dv) = d_v {
            let po = &self.layout.proj_out;
            let dim = po.fan_out;
            let mut dy = vec![0.0; t_out * dim];
            for k in 0..t_out {
                let v = out.v.row(k);
                let g = dv.row(k);
                let dot: f64 = v.iter().zip(g).map(|(a, b)| a * b).sum();
                let n = cache.proj_norm[k];
                for j in 0..dim {
                    dy[k * dim + j] = (g[j] - v[j] * dot) / n;
                }
            }
            let ph = &self.layout.proj_hidden;
            let mut d_act = vec![0.0; t_out * ph.fan_out];
            dense_backward(&cache.proj_act, &dy, t_out, po, params, grad, Some(&mut d_act));
            for (g, &pre) in d_act.iter_mut().zip(&cache.proj_pre) {
                if pre <= 0.0 {
                    *g = 0.0;
                }
            }
            dense_backward(out.q.as_slice(), &d_act, t_out, ph, params, grad, Some(&mut dq));
        }

        let h = self.config.recurrent_hidden;
        let input_dim = self.config.recurrent_input();
        let mut dh_fwd = vec![0.0; t_out * h];
        let mut dh_bwd = vec![0.0; t_out * h];
        for k in 0..t_out {
            dh_fwd[k * h..(k + 1) * h].copy_from_slice(&dq[k * d..k * d + h]);
            let kr = t_out - 1 - k;
            dh_bwd[kr * h..(kr + 1) * h].copy_from_slice(&dq[k * d + h..(k + 1) * d]);
        }
        let dx_fwd =
            gru_backward(&cache.gru[0], &dh_fwd, t_out, input_dim, h, &self.layout.gru[0], params, grad);
        let dx_bwd =
            gru_backward(&cache.gru[1], &dh_bwd, t_out, input_dim, h, &self.layout.gru[1], params, grad);
        let mut d_act = dx_fwd;
        for (k, row) in dx_bwd.chunks_exact(input_dim).enumerate() {
            let dst = &mut d_act[(t_out - 1 - k) * input_dim..(t_out - k) * input_dim];
            dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }

        for (i, (spans, block)) in
            self.layout.conv.iter().zip(&self.config.conv_blocks).enumerate().rev()
        {
            let c = &cache.conv[i];
            let mut d_relu =
                avg_pool_backward(&d_act, c.t, c.f, spans.c_out, block.time_pool, block.freq_pool);
            for (g, &a) in d_relu.iter_mut().zip(&c.relu_out) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
            d_act = conv_backward(&c.col, &d_relu, c.t, c.f, spans, params, grad, i > 0);
        }
        Ok(())
    }
}

fn reverse_rows(m: &[f64], cols: usize) -> Vec<f64> {
    m.chunks_exact(cols).rev().flatten().copied().collect()
}

/// Frequency taps of a 3-wide kernel centered on `fi` that fall inside
/// `0..f`, as (first tap, first source bin, tap count).
fn freq_taps(fi: usize, f: usize) -> (usize, usize, usize) {
    let first = usize::from(fi == 0);
    let last = if fi + 1 == f { 2 } else { 3 };
    (first, fi + first - 1, last - first)
}

fn im2col(input: &[f64], t: usize, f: usize, c_in: usize) -> Vec<f64> {
    let k = 9 * c_in;
    let mut col = vec![0.0; t * f * k];
    for ti in 0..t {
        for dt in 0..3 {
            let ts = ti + dt;
            if ts == 0 || ts > t {
                continue;
            }
            let src_row = &input[(ts - 1) * f * c_in..ts * f * c_in];
            for fi in 0..f {
                let (tap, fs, n) = freq_taps(fi, f);
                let dst = (ti * f + fi) * k + (dt * 3 + tap) * c_in;
                col[dst..dst + n * c_in].copy_from_slice(&src_row[fs * c_in..(fs + n) * c_in]);
            }
        }
    }
    col
}

fn col2im(col: &[f64], t: usize, f: usize, c_in: usize) -> Vec<f64> {
    let k = 9 * c_in;
    let mut out = vec![0.0; t * f * c_in];
    for ti in 0..t {
        for fi in 0..f {
            let (tap, fs, n) = freq_taps(fi, f);
            for dt in 0..3 {
                let ts = ti + dt;
                if ts == 0 || ts > t {
                    continue;
                }
                let src = (ti * f + fi) * k + (dt * 3 + tap) * c_in;
                let dst = ((ts - 1) * f + fs) * c_in;
                out[dst..dst + n * c_in].iter_mut().zip(&col[src..src + n * c_in]).for_each(|(o, v)| *o += v);
            }
        }
    }
    out
}

fn conv_relu(col: &[f64], t: usize, f: usize, s: &ConvSpans, params: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; t * f * s.c_out];
    gemm(View::new(col, t * f, 9 * s.c_in), View::new(s.w.of(params), 9 * s.c_in, s.c_out), &mut out, 0.0);
    add_row_bias(&mut out, s.b.of(params));
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    col: &[f64],
    d_out: &[f64],
    t: usize,
    f: usize,
    s: &ConvSpans,
    params: &[f64],
    grad: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let k = 9 * s.c_in;
    gemm(View::new(col, t * f, k).t(), View::new(d_out, t * f, s.c_out), s.w.of_mut(grad), 1.0);
    add_col_sums(d_out, s.c_out, s.b.of_mut(grad));
    if !need_input_grad {
        return Vec::new();
    }
    let mut d_col = vec![0.0; t * f * k];
    gemm(View::new(d_out, t * f, s.c_out), View::new(s.w.of(params), k, s.c_out).t(), &mut d_col, 0.0);
    col2im(&d_col, t, f, s.c_in)
}

fn avg_pool(x: &[f64], t: usize, f: usize, c: usize, tp: usize, fp: usize) -> Vec<f64> {
    let (to, fo) = (t / tp, f / fp);
    let scale = 1.0 / (tp * fp) as f64;
    let mut out = vec![0.0; to * fo * c];
    for (i, dst) in out.chunks_exact_mut(c).enumerate() {
        let (ot, of) = (i / fo, i % fo);
        for ti in ot * tp..(ot + 1) * tp {
            for fi in of * fp..(of + 1) * fp {
                let src = &x[(ti * f + fi) * c..(ti * f + fi + 1) * c];
                dst.iter_mut().zip(src).for_each(|(a, b)| *a += b * scale);
            }
        }
    }
    out
}

fn avg_pool_backward(d_out: &[f64], t: usize, f: usize, c: usize, tp: usize, fp: usize) -> Vec<f64> {
    let fo = f / fp;
    let scale = 1.0 / (tp * fp) as f64;
    let mut dx = vec![0.0; t * f * c];
    for (i, src) in d_out.chunks_exact(c).enumerate() {
        let (ot, of) = (i / fo, i % fo);
        for ti in ot * tp..(ot + 1) * tp {
            for fi in of * fp..(of + 1) * fp {
                let dst = &mut dx[(ti * f + fi) * c..(ti * f + fi + 1) * c];
                dst.iter_mut().zip(src).for_each(|(a, b)| *a = b * scale);
            }
        }
    }
    dx
}

fn dense(x: &[f64], rows: usize, s: &DenseSpans, params: &[f64], out: &mut [f64]) {
    gemm(View::new(x, rows, s.fan_in), View::new(s.w.of(params), s.fan_in, s.fan_out), out, 0.0);
    add_row_bias(out, s.b.of(params));
}

fn dense_backward(
    x: &[f64],
    d_out: &[f64],
    rows: usize,
    s: &DenseSpans,
    params: &[f64],
    grad: &mut [f64],
    d_x: Option<&mut Vec<f64>>,
) {
    gemm(View::new(x, rows, s.fan_in).t(), View::new(d_out, rows, s.fan_out), s.w.of_mut(grad), 1.0);
    add_col_sums(d_out, s.fan_out, s.b.of_mut(grad));
    if let Some(dx) = d_x {
        gemm(View::new(d_out, rows, s.fan_out), View::new(s.w.of(params), s.fan_in, s.fan_out).t(), dx, 1.0);
    }
}

impl GruCache {
    /// Hidden state emitted at processing step `k`.
    fn h_out(&self, k: usize, h: usize) -> Vec<f64> {
        // h_prev holds the state before each step; the state after step k is
        // recomputed from the gates to avoid storing it twice.
        let (z, n, hp) = (&self.z[k * h..(k + 1) * h], &self.n[k * h..(k + 1) * h], &self.h_prev[k * h..(k + 1) * h]);
        (0..h).map(|j| (1.0 - z[j]) * n[j] + z[j] * hp[j]).collect()
    }
}

/// GRU with gate order `[r, z, n]`:
/// `n = tanh(W_in x + b_in + r * (W_hn h + b_hn))`, `h' = (1 - z) n + z h`.
fn gru_forward(x: &[f64], t: usize, input_dim: usize, h: usize, s: &GruSpans, params: &[f64]) -> GruCache {
    let g3 = 3 * h;
    let mut xp = vec![0.0; t * g3];
    gemm(View::new(x, t, input_dim), View::new(s.w_ih.of(params), input_dim, g3), &mut xp, 0.0);
    add_row_bias(&mut xp, s.b_ih.of(params));
    let w_hh = s.w_hh.of(params);
    let b_hh = s.b_hh.of(params);

    let mut cache = GruCache {
        x: x.to_vec(),
        h_prev: vec![0.0; t * h],
        r: vec![0.0; t * h],
        z: vec![0.0; t * h],
        n: vec![0.0; t * h],
        hn: vec![0.0; t * h],
    };
    let mut state = vec![0.0; h];
    let mut hp = vec![0.0; g3];
    for k in 0..t {
        cache.h_prev[k * h..(k + 1) * h].copy_from_slice(&state);
        hp.copy_from_slice(b_hh);
        gemm(View::new(&state, 1, h), View::new(w_hh, h, g3), &mut hp, 1.0);
        let xr = &xp[k * g3..(k + 1) * g3];
        for j in 0..h {
            let r = sigmoid(xr[j] + hp[j]);
            let z = sigmoid(xr[h + j] + hp[h + j]);
            let n = (xr[2 * h + j] + r * hp[2 * h + j]).tanh();
            cache.r[k * h + j] = r;
            cache.z[k * h + j] = z;
            cache.n[k * h + j] = n;
            cache.hn[k * h + j] = hp[2 * h + j];
            state[j] = (1.0 - z) * n + z * state[j];
        }
    }
    cache
}

/// Backpropagation through time; returns the gradient for the input
/// sequence (in processing order).
#[allow(clippy::too_many_arguments)]
fn gru_backward(
    c: &GruCache,
    dh_out: &[f64],
    t: usize,
    input_dim: usize,
    h: usize,
    s: &GruSpans,
    params: &[f64],
    grad: &mut [f64],
) -> Vec<f64> {
    let g3 = 3 * h;
    let w_hh = s.w_hh.of(params);
    let mut d_xp = vec![0.0; t * g3];
    let mut d_hp = vec![0.0; t * g3];
    let mut dh_next = vec![0.0; h];
    for k in (0..t).rev() {
        let mut dh = dh_out[k * h..(k + 1) * h].to_vec();
        dh.iter_mut().zip(&dh_next).for_each(|(a, b)| *a += b);
        let row_x = &mut d_xp[k * g3..(k + 1) * g3];
        let row_h = &mut d_hp[k * g3..(k + 1) * g3];
        let mut dh_prev = vec![0.0; h];
        for j in 0..h {
            let i = k * h + j;
            let (r, z, n, hn, hprev) = (c.r[i], c.z[i], c.n[i], c.hn[i], c.h_prev[i]);
            let dn_pre = dh[j] * (1.0 - z) * (1.0 - n * n);
            let dz_pre = dh[j] * (hprev - n) * z * (1.0 - z);
            let dr_pre = dn_pre * hn * r * (1.0 - r);
            row_x[j] = dr_pre;
            row_x[h + j] = dz_pre;
            row_x[2 * h + j] = dn_pre;
            row_h[j] = dr_pre;
            row_h[h + j] = dz_pre;
            row_h[2 * h + j] = dn_pre * r;
            dh_prev[j] = dh[j] * z;
        }
        gemm(View::new(row_h, 1, g3), View::new(w_hh, h, g3).t(), &mut dh_prev, 1.0);
        dh_next = dh_prev;
    }
    gemm(View::new(&c.h_prev, t, h).t(), View::new(&d_hp, t, g3), s.w_hh.of_mut(grad), 1.0);
    add_col_sums(&d_hp, g3, s.b_hh.of_mut(grad));
    gemm(View::new(&c.x, t, input_dim).t(), View::new(&d_xp, t, g3), s.w_ih.of_mut(grad), 1.0);
    add_col_sums(&d_xp, g3, s.b_ih.of_mut(grad));
    let mut dx = vec![0.0; t * input_dim];
    gemm(View::new(&d_xp, t, g3), View::new(s.w_ih.of(params), input_dim, g3).t(), &mut dx, 0.0);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            mel_bands: 8,
            conv_blocks: vec![
                ConvBlock { filters: 3, time_pool: 2, freq_pool: 2 },
                ConvBlock { filters: 4, time_pool: 2, freq_pool: 2 },
            ],
            recurrent_hidden: 4,
            projector_hidden: 6,
            projection_dim: 5,
            classes: 3,
        }
    }

    fn random_input(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn im2col_and_col2im_match_padded_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(t, f, c) in &[(1, 1, 1), (1, 4, 2), (5, 1, 3), (2, 2, 1), (6, 5, 2)] {
            let x: Vec<f64> = (0..t * f * c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let at = |ts: isize, fs: isize, ci: usize| {
                if ts < 0 || fs < 0 || ts >= t as isize || fs >= f as isize {
                    0.0
                } else {
                    x[(ts as usize * f + fs as usize) * c + ci]
                }
            };
            let col = im2col(&x, t, f, c);
            assert_eq!(col.len(), t * f * 9 * c);
            for ti in 0..t {
                for fi in 0..f {
                    for tap in 0..9 {
                        for ci in 0..c {
                            let want = at(ti as isize + tap as isize / 3 - 1, fi as isize + tap as isize % 3 - 1, ci);
                            assert_eq!(col[((ti * f + fi) * 9 + tap) * c + ci], want);
                        }
                    }
                }
            }
            // col2im is the adjoint of im2col: <im2col(x), y> = <x, col2im(y)>.
            let y: Vec<f64> = (0..col.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&col2im(&y, t, f, c)).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{t}x{f}x{c}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn zero_params_give_half_probabilities() {
        let net = Network::new(tiny_config()).unwrap();
        let params = vec![0.0; net.num_params()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = net.forward(&params, &random_input(16, 8, &mut rng)).unwrap();
        assert!(out.p.as_slice().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn default_config_pools_624_to_156() {
        let cfg = NetworkConfig { classes: 3, ..NetworkConfig::default() };
        assert_eq!(cfg.time_pool_total(), 4);
        assert_eq!(cfg.output_frames(624), 156);
        assert_eq!(cfg.feature_dim(), 64);
        let net = Network::new(cfg).unwrap();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let x = Matrix::filled(624, 128, 0.1);
        let out = net.forward(&params, &x).unwrap();
        assert_eq!(out.p.shape(), (156, 3));
        assert_eq!(out.q.shape(), (156, 64));
        assert_eq!(out.v.shape(), (156, 32));
    }

    #[test]
    fn projections_have_unit_norm() {
        let net = Network::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = net.init_params(&mut rng);
        let out = net.forward(&params, &random_input(24, 8, &mut rng)).unwrap();
        for k in 0..out.v.rows() {
            let n: f64 = out.v.row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert!(out.p.as_slice().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let net = Network::new(tiny_config()).unwrap();
        let params = vec![0.0; net.num_params()];
        assert!(net.forward(&params, &Matrix::zeros(16, 7)).is_err());
        assert!(net.forward(&params, &Matrix::zeros(15, 8)).is_err());
        assert!(net.forward(&params[1..], &Matrix::zeros(16, 8)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = Network::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = net.init_params(&mut rng);
        let cache = net.forward_train(&params, &random_input(16, 8, &mut rng)).unwrap();
        let mut g = vec![0.0; net.num_params()];
        let zp = Matrix::zeros(4, 3);
        let zv = Matrix::zeros(4, 5);
        net.backward(&params, &cache, Some(&zp), Some(&zv), &mut g).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    /// Central differences of `sum(P * wp) + sum(V * wv)`.
    #[test]
    fn backward_matches_finite_differences() {
        let net = Network::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = net.init_params(&mut rng);
        let x = random_input(16, 8, &mut rng);
        let wp = random_input(4, 3, &mut rng);
        let wv = random_input(4, 5, &mut rng);
        let objective = |p: &[f64]| {
            let o = net.forward(p, &x).unwrap();
            let a: f64 = o.p.as_slice().iter().zip(wp.as_slice()).map(|(a, b)| a * b).sum();
            let b: f64 = o.v.as_slice().iter().zip(wv.as_slice()).map(|(a, b)| a * b).sum();
            a + b
        };
        let cache = net.forward_train(&params, &x).unwrap();
        let mut g = vec![0.0; net.num_params()];
        net.backward(&params, &cache, Some(&wp), Some(&wv), &mut g).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            let up = objective(&p);
            p[i] -= 2.0 * h;
            let down = objective(&p);
            let num = (up - down) / (2.0 * h);
            let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }
}
