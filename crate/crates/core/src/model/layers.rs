use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::params::{Attention, LayerNormParams, Linear};
use super::{ModelError, Real, Result};

pub const LN_EPS: f64 = 1e-5;

/// Sinusoidal position table `[L × d]`: `sin` on even columns, `cos` on odd.
pub fn positional_encoding<F: Real>(len: usize, d: usize) -> Array2<F> {
    Array2::from_shape_fn((len, d), |(t, j)| {
        let i = (j / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * i / d as f64);
        F::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

pub(crate) fn linear_fwd<F: Real>(l: &Linear<F>, x: ArrayView2<F>) -> Array2<F> {
    let mut y = x.dot(&l.weight);
    y += &l.bias;
    y
}

/// Accumulates parameter gradients into `g` and returns `dL/dx`.
pub(crate) fn linear_bwd<F: Real>(l: &Linear<F>, x: ArrayView2<F>, dy: ArrayView2<F>, g: &mut Linear<F>) -> Array2<F> {
    linear_bwd_params(x, dy, g);
    dy.dot(&l.weight.t())
}

pub(crate) fn linear_bwd_params<F: Real>(x: ArrayView2<F>, dy: ArrayView2<F>, g: &mut Linear<F>) {
    general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut g.weight);
    g.bias += &dy.sum_axis(Axis(0));
}

pub(crate) fn vec_linear_fwd<F: Real>(l: &Linear<F>, x: ArrayView1<F>) -> Array1<F> {
    x.dot(&l.weight) + &l.bias
}

pub(crate) fn vec_linear_bwd<F: Real>(
    l: &Linear<F>,
    x: ArrayView1<F>,
    dy: ArrayView1<F>,
    g: &mut Linear<F>,
) -> Array1<F> {
    linear_bwd_params(x.insert_axis(Axis(0)), dy.insert_axis(Axis(0)), g);
    l.weight.dot(&dy)
}

/// Normalization statistics of one layer-norm call.
#[derive(Debug, Clone)]
pub(crate) struct Normalized<F> {
    pub xhat: Array2<F>,
    pub rstd: Array1<F>,
}

/// Row-wise standardization without the affine part.
pub(crate) fn normalize<F: Real>(x: ArrayView2<F>) -> Normalized<F> {
    let d = F::from_usize(x.ncols()).expect("width");
    let eps = F::lit(LN_EPS);
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / d;
        *r = F::one() / (var + eps).sqrt();
        let k = *r;
        row.mapv_inplace(|v| v * k);
    }
    Normalized { xhat, rstd }
}

pub(crate) fn affine<F: Real>(n: &Normalized<F>, p: &LayerNormParams<F>) -> Array2<F> {
    let mut y = &n.xhat * &p.gain;
    y += &p.bias;
    y
}

/// Gradient of the affine part: accumulates into `g`, returns `dL/dxhat`.
pub(crate) fn affine_bwd<F: Real>(
    n: &Normalized<F>,
    p: &LayerNormParams<F>,
    dy: ArrayView2<F>,
    g: &mut LayerNormParams<F>,
) -> Array2<F> {
    g.bias += &dy.sum_axis(Axis(0));
    g.gain += &(&dy * &n.xhat).sum_axis(Axis(0));
    &dy * &p.gain
}

/// Gradient through the standardization, from `dL/dxhat` to `dL/dx`.
pub(crate) fn normalize_bwd<F: Real>(n: &Normalized<F>, dxhat: ArrayView2<F>) -> Array2<F> {
    let d = F::from_usize(n.xhat.ncols()).expect("width");
    let mut dx = dxhat.to_owned();
    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(n.xhat.rows()).zip(&n.rstd) {
        let m1 = row.sum() / d;
        let m2 = row.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / d;
        Zip::from(&mut row).and(&xh).for_each(|g, &x| *g = r * (*g - m1 - x * m2));
    }
    dx
}

/// Layer normalization over the last axis of `x`.
pub fn layer_norm<F: Real>(x: ArrayView2<F>, p: &LayerNormParams<F>) -> Result<Array2<F>> {
    if p.gain.len() != x.ncols() || p.bias.len() != x.ncols() {
        return Err(ModelError::Shape(format!("layer norm of width {} on {} columns", p.gain.len(), x.ncols())));
    }
    Ok(affine(&normalize(x), p))
}

pub(crate) fn softmax_rows_inplace<F: Real>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionCache<F> {
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    /// Per-head attention weights `[Lq × Lk]`.
    pub weights: Vec<Array2<F>>,
    /// Concatenated head outputs, input of the output projection.
    pub heads: Array2<F>,
}

fn check_attention_shapes<F: Real>(
    p: &Attention<F>,
    q: ArrayView2<F>,
    k: ArrayView2<F>,
    v: ArrayView2<F>,
    n_heads: usize,
) -> Result<()> {
    let d = p.q.n_out();
    if n_heads == 0 || d % n_heads != 0 {
        return Err(ModelError::Shape(format!("width {d} not divisible by {n_heads} heads")));
    }
    if q.ncols() != p.q.n_in() || k.ncols() != p.k.n_in() || v.ncols() != p.v.n_in() {
        return Err(ModelError::Shape(format!(
            "attention inputs have widths {}/{}/{}, projections expect {}",
            q.ncols(),
            k.ncols(),
            v.ncols(),
            p.q.n_in()
        )));
    }
    if k.nrows() != v.nrows() {
        return Err(ModelError::Shape(format!("{} keys but {} values", k.nrows(), v.nrows())));
    }
    Ok(())
}

pub(crate) fn attention_fwd<F: Real>(
    p: &Attention<F>,
    q_in: ArrayView2<F>,
    k_in: ArrayView2<F>,
    v_in: ArrayView2<F>,
    n_heads: usize,
) -> (Array2<F>, AttentionCache<F>) {
    let q = linear_fwd(&p.q, q_in);
    let k = linear_fwd(&p.k, k_in);
    let v = linear_fwd(&p.v, v_in);
    let d = q.ncols();
    let dk = d / n_heads;
    let scale = F::one() / F::from_usize(dk).expect("head dim").sqrt();
    let mut heads = Array2::zeros((q.nrows(), d));
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let mut w = q.slice(cols).dot(&k.slice(cols).t());
        w.mapv_inplace(|x| x * scale);
        softmax_rows_inplace(&mut w);
        general_mat_mul(F::one(), &w, &v.slice(cols), F::zero(), &mut heads.slice_mut(cols));
        weights.push(w);
    }
    let out = linear_fwd(&p.out, heads.view());
    (out, AttentionCache { q, k, v, weights, heads })
}

/// Returns gradients with respect to the query, key and value inputs.
pub(crate) fn attention_bwd<F: Real>(
    p: &Attention<F>,
    c: &AttentionCache<F>,
    q_in: ArrayView2<F>,
    k_in: ArrayView2<F>,
    v_in: ArrayView2<F>,
    dout: ArrayView2<F>,
    g: &mut Attention<F>,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let n_heads = c.weights.len();
    let d = c.q.ncols();
    let dk = d / n_heads;
    let scale = F::one() / F::from_usize(dk).expect("head dim").sqrt();
    let dheads = linear_bwd(&p.out, c.heads.view(), dout, &mut g.out);
    let mut dq = Array2::zeros(c.q.dim());
    let mut dkm = Array2::zeros(c.k.dim());
    let mut dv = Array2::zeros(c.v.dim());
    for (h, w) in c.weights.iter().enumerate() {
        let cols = s![.., h * dk..(h + 1) * dk];
        let dh = dheads.slice(cols);
        general_mat_mul(F::one(), &w.t(), &dh, F::zero(), &mut dv.slice_mut(cols));
        let mut ds = dh.dot(&c.v.slice(cols).t());
        for (mut row, wrow) in ds.rows_mut().into_iter().zip(w.rows()) {
            let dot = row.iter().zip(wrow).map(|(&a, &b)| a * b).sum::<F>();
            Zip::from(&mut row).and(&wrow).for_each(|g, &p| *g = p * (*g - dot) * scale);
        }
        general_mat_mul(F::one(), &ds, &c.k.slice(cols), F::zero(), &mut dq.slice_mut(cols));
        general_mat_mul(F::one(), &ds.t(), &c.q.slice(cols), F::zero(), &mut dkm.slice_mut(cols));
    }
    let dq_in = linear_bwd(&p.q, q_in, dq.view(), &mut g.q);
    let dk_in = linear_bwd(&p.k, k_in, dkm.view(), &mut g.k);
    let dv_in = linear_bwd(&p.v, v_in, dv.view(), &mut g.v);
    (dq_in, dk_in, dv_in)
}

/// Scaled dot-product attention with `n_heads` heads over projected inputs,
/// followed by the output projection. Inputs are `[rows × d_model]`.
pub fn multi_head_attention<F: Real>(
    q: ArrayView2<F>,
    k: ArrayView2<F>,
    v: ArrayView2<F>,
    params: &Attention<F>,
    n_heads: usize,
) -> Result<Array2<F>> {
    check_attention_shapes(params, q, k, v, n_heads)?;
    Ok(attention_fwd(params, q, k, v, n_heads).0)
}

/// Per-head attention weight matrices for the same call.
pub fn multi_head_attention_weights<F: Real>(
    q: ArrayView2<F>,
    k: ArrayView2<F>,
    v: ArrayView2<F>,
    params: &Attention<F>,
    n_heads: usize,
) -> Result<Vec<Array2<F>>> {
    check_attention_shapes(params, q, k, v, n_heads)?;
    Ok(attention_fwd(params, q, k, v, n_heads).1.weights)
}
