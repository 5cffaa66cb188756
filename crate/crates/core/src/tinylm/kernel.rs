//! Forward and backward passes of the toy decoder, generic over the float
//! type so the same code runs in float32 for featurization and float64 for
//! the finite-difference checks.
//!
//! Architecture per layer (pre-norm, no biases, parameter-free RMS norm):
//! `x += Attn(norm(x)) Wo^T`, `x += gelu(norm(x) Wup^T) Wdown^T`; the input is
//! the token embedding plus a fixed sinusoidal position code and the output
//! is `norm(x) Whead^T`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use num_traits::{Float, FromPrimitive};

use super::params::ParamLayout;
use super::{ModelConfig, OutputFn, QWeighting};

pub trait Real: ndarray::LinalgScalar + Float + FromPrimitive + Send + Sync + std::fmt::Debug + 'static {}
impl Real for f32 {}
impl Real for f64 {}

#[inline]
fn c<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

const NORM_EPS: f64 = 1e-6;
const POSITION_SCALE: f64 = 0.5;
/// Floor on `1 - p` for the margin output function.
const MARGIN_FLOOR: f64 = 1e-6;

struct LayerWeights<'a, T> {
    wq: ArrayView2<'a, T>,
    wk: ArrayView2<'a, T>,
    wv: ArrayView2<'a, T>,
    wo: ArrayView2<'a, T>,
    up: ArrayView2<'a, T>,
    down: ArrayView2<'a, T>,
}

pub(crate) struct Weights<'a, T> {
    embed: ArrayView2<'a, T>,
    layers: Vec<LayerWeights<'a, T>>,
    head: ArrayView2<'a, T>,
    heads: usize,
}

impl<'a, T: Real> Weights<'a, T> {
    pub(crate) fn new(config: &ModelConfig, layout: &ParamLayout, buf: &'a [T]) -> Self {
        let layers = (0..config.layers)
            .map(|l| {
                let ts = layout.layer(l);
                LayerWeights {
                    wq: layout.view(buf, &ts[0]),
                    wk: layout.view(buf, &ts[1]),
                    wv: layout.view(buf, &ts[2]),
                    wo: layout.view(buf, &ts[3]),
                    up: layout.view(buf, &ts[4]),
                    down: layout.view(buf, &ts[5]),
                }
            })
            .collect();
        Weights {
            embed: layout.view(buf, layout.embedding()),
            layers,
            head: layout.view(buf, layout.head()),
            heads: config.heads,
        }
    }
}

struct LayerCache<T> {
    n1: Array2<T>,
    r1: Array1<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
    n2: Array2<T>,
    r2: Array1<T>,
    u: Array2<T>,
    a: Array2<T>,
}

/// Activations kept for the backward pass.
pub(crate) struct Trace<T> {
    inputs: Vec<u32>,
    layers: Vec<LayerCache<T>>,
    nf: Array2<T>,
    rf: Array1<T>,
    pub(crate) logits: Array2<T>,
}

fn position_code<T: Real>(len: usize, dim: usize) -> Array2<T> {
    Array2::from_shape_fn((len, dim), |(t, i)| {
        let freq = 10000f64.powf(-((2 * (i / 2)) as f64) / dim as f64);
        let angle = t as f64 * freq;
        let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        c(POSITION_SCALE * v)
    })
}

fn rms_norm<T: Real>(x: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let dim = c::<T>(x.ncols() as f64);
    let r = x.map_axis(Axis(1), |row| {
        let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / dim;
        (ms + c(NORM_EPS)).sqrt()
    });
    let y = x / &r.view().insert_axis(Axis(1));
    (y, r)
}

fn rms_norm_backward<T: Real>(dy: &Array2<T>, y: &Array2<T>, r: &Array1<T>) -> Array2<T> {
    let dim = c::<T>(y.ncols() as f64);
    let mut dx = dy.clone();
    for ((mut dx_row, y_row), &rt) in dx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))).zip(r.iter()) {
        let proj = dx_row.iter().zip(y_row.iter()).fold(T::zero(), |acc, (&a, &b)| acc + a * b) / dim;
        Zip::from(&mut dx_row).and(&y_row).for_each(|d, &yy| *d = (*d - yy * proj) / rt);
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

fn gelu<T: Real>(u: T) -> T {
    let inner = c::<T>(GELU_K) * (u + c::<T>(GELU_C) * u * u * u);
    c::<T>(0.5) * u * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(u: T) -> T {
    let inner = c::<T>(GELU_K) * (u + c::<T>(GELU_C) * u * u * u);
    let th = inner.tanh();
    let dinner = c::<T>(GELU_K) * (T::one() + c::<T>(3.0 * GELU_C) * u * u);
    c::<T>(0.5) * (T::one() + th) + c::<T>(0.5) * u * (T::one() - th * th) * dinner
}

fn softmax_rows_inplace<T: Real>(m: &mut Array2<T>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum = sum + e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

/// Runs the model on `inputs`; row `t` of the logits predicts token `t + 1`.
pub(crate) fn forward<T: Real>(w: &Weights<'_, T>, inputs: &[u32]) -> Trace<T> {
    let len = inputs.len();
    let dim = w.embed.ncols();
    let hd = dim / w.heads;
    let scale = c::<T>(1.0 / (hd as f64).sqrt());

    let mut x = position_code::<T>(len, dim);
    for (t, &tok) in inputs.iter().enumerate() {
        x.row_mut(t).zip_mut_with(&w.embed.row(tok as usize), |a, &b| *a = *a + b);
    }

    let mut layers = Vec::with_capacity(w.layers.len());
    for lw in &w.layers {
        let (n1, r1) = rms_norm(&x);
        let q = n1.dot(&lw.wq.t());
        let k = n1.dot(&lw.wk.t());
        let v = n1.dot(&lw.wv.t());
        let mut ctx = Array2::<T>::zeros((len, dim));
        let mut probs = Vec::with_capacity(w.heads);
        for h in 0..w.heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            for i in 0..len {
                for j in 0..len {
                    scores[[i, j]] = if j > i { T::neg_infinity() } else { scores[[i, j]] * scale };
                }
            }
            softmax_rows_inplace(&mut scores);
            ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        x = x + ctx.dot(&lw.wo.t());
        let (n2, r2) = rms_norm(&x);
        let u = n2.dot(&lw.up.t());
        let a = u.mapv(gelu);
        x = x + a.dot(&lw.down.t());
        layers.push(LayerCache { n1, r1, q, k, v, probs, ctx, n2, r2, u, a });
    }
    let (nf, rf) = rms_norm(&x);
    let logits = nf.dot(&w.head.t());
    Trace { inputs: inputs.to_vec(), layers, nf, rf, logits }
}

fn accumulate<T: Real>(layout: &ParamLayout, grads: &mut [T], index: usize, a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) {
    let info = &layout.tensors()[index];
    let mut g = layout.view_mut(grads, info);
    general_mat_mul(T::one(), &a, &b, T::one(), &mut g);
}

/// Backpropagates `dlogits` and adds parameter gradients into `grads`
/// (a flat buffer laid out like the parameters). Input-embedding gradients
/// are only accumulated when `want_embedding` is set.
pub(crate) fn backward<T: Real>(
    w: &Weights<'_, T>,
    layout: &ParamLayout,
    trace: &Trace<T>,
    dlogits: &Array2<T>,
    grads: &mut [T],
    want_embedding: bool,
) {
    let dim = w.embed.ncols();
    let hd = dim / w.heads;
    let scale = c::<T>(1.0 / (hd as f64).sqrt());
    let head_index = layout.tensors().len() - 1;

    accumulate(layout, grads, head_index, dlogits.t(), trace.nf.view());
    let dnf = dlogits.dot(&w.head);
    let mut dx = rms_norm_backward(&dnf, &trace.nf, &trace.rf);

    for (l, (lw, cache)) in w.layers.iter().zip(&trace.layers).enumerate().rev() {
        let base = 1 + 6 * l;
        // MLP residual branch.
        accumulate(layout, grads, base + 5, dx.t(), cache.a.view());
        let da = dx.dot(&lw.down);
        let du = Zip::from(&da).and(&cache.u).map_collect(|&g, &u| g * gelu_grad(u));
        accumulate(layout, grads, base + 4, du.t(), cache.n2.view());
        let dn2 = du.dot(&lw.up);
        let dx_mid = &dx + &rms_norm_backward(&dn2, &cache.n2, &cache.r2);

        // Attention residual branch.
        accumulate(layout, grads, base + 3, dx_mid.t(), cache.ctx.view());
        let dctx = dx_mid.dot(&lw.wo);
        let len = dctx.nrows();
        let mut dq = Array2::<T>::zeros((len, dim));
        let mut dk = Array2::<T>::zeros((len, dim));
        let mut dv = Array2::<T>::zeros((len, dim));
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = s![.., h * hd..(h + 1) * hd];
            let dctx_h = dctx.slice(cols);
            let dp = dctx_h.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
            let mut ds = dp;
            for (mut ds_row, p_row) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                let inner = ds_row.iter().zip(p_row.iter()).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                Zip::from(&mut ds_row).and(&p_row).for_each(|d, &pp| *d = pp * (*d - inner) * scale);
            }
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        accumulate(layout, grads, base, dq.t(), cache.n1.view());
        accumulate(layout, grads, base + 1, dk.t(), cache.n1.view());
        accumulate(layout, grads, base + 2, dv.t(), cache.n1.view());
        let dn1 = dq.dot(&lw.wq) + dk.dot(&lw.wk) + dv.dot(&lw.wv);
        dx = dx_mid + rms_norm_backward(&dn1, &cache.n1, &cache.r1);
    }

    if want_embedding {
        let info = layout.embedding();
        let mut ge = layout.view_mut(grads, info);
        for (t, &tok) in trace.inputs.iter().enumerate() {
            ge.row_mut(tok as usize).zip_mut_with(&dx.row(t), |a, &b| *a = *a + b);
        }
    }
}

/// Log-probability of `token` under logits row `t`.
pub(crate) fn log_prob<T: Real>(logits: &Array2<T>, t: usize, token: u32) -> T {
    let row = logits.row(t);
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let lse = max + row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp()).ln();
    row[token as usize] - lse
}

/// Builds `Q * df/dlogits` for every target position.
///
/// `targets` lists `(row, token)` pairs. Returns the logit gradient and the
/// per-target probabilities `p` of the correct token.
pub(crate) fn output_gradient<T: Real>(
    logits: &Array2<T>,
    targets: &[(usize, u32)],
    output_fn: OutputFn,
    weighting: QWeighting,
) -> (Array2<T>, Vec<T>) {
    let mut dlogits = Array2::<T>::zeros(logits.raw_dim());
    let mut probs = Vec::with_capacity(targets.len());
    let mut softmaxes = Vec::with_capacity(targets.len());
    for &(t, tok) in targets {
        let mut row = logits.row(t).to_owned().insert_axis(Axis(0));
        softmax_rows_inplace(&mut row);
        probs.push(row[[0, tok as usize]]);
        softmaxes.push(row);
    }
    let mean_p = if probs.is_empty() {
        T::zero()
    } else {
        probs.iter().fold(T::zero(), |a, &b| a + b) / c(probs.len() as f64)
    };
    for (((t, tok), sm), &p) in targets.iter().copied().zip(softmaxes).zip(&probs) {
        let tok = tok as usize;
        let mut out = dlogits.row_mut(t);
        // Gradient of the raw output function f with respect to the logits.
        match output_fn {
            OutputFn::Loss => {
                out.assign(&sm.row(0));
                out[tok] = out[tok] - T::one();
            }
            OutputFn::Margin => {
                let denom = (T::one() - p).max(c(MARGIN_FLOOR));
                out.assign(&sm.row(0).mapv(|v| -v / denom));
                out[tok] = out[tok] + T::one() / denom;
            }
            OutputFn::Logit => out[tok] = T::one(),
        }
        // Q = dLoss/df; the loss needs no correction.
        let q = match (output_fn, weighting) {
            (OutputFn::Loss, _) | (_, QWeighting::Unweighted) => T::one(),
            (_, QWeighting::Token) => p - T::one(),
            (_, QWeighting::ExampleMean) => mean_p - T::one(),
        };
        if q != T::one() {
            out.mapv_inplace(|v| v * q);
        }
    }
    (dlogits, probs)
}
