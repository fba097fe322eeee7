//! Forward/backward kernels shared by the selector: layer norm, GELU,
//! affine maps and the causal attention block.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::lora::BlockAdapters;
use super::params::{Block, LayerNorm, Linear};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + GELU_K * z * z * z)).tanh())
}

pub(crate) fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + GELU_K * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * z * z)
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn linear(x: ArrayView2<f64>, lin: &Linear) -> Array2<f64> {
    let mut y = x.dot(&lin.weight);
    y += &lin.bias;
    y
}

/// Accumulates weight/bias gradients of `y = x W + b` and returns `dx`.
pub(crate) fn linear_backward(
    x: ArrayView2<f64>,
    dy: ArrayView2<f64>,
    lin: &Linear,
    grad: Option<&mut Linear>,
) -> Array2<f64> {
    if let Some(g) = grad {
        general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut g.weight);
        g.bias += &dy.sum_axis(Axis(0));
    }
    dy.dot(&lin.weight.t())
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

pub(crate) fn layer_norm(x: ArrayView2<f64>, ln: &LayerNorm) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let y = &xhat * &ln.gamma + &ln.beta;
    (y, LnCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward(
    dy: ArrayView2<f64>,
    cache: &LnCache,
    ln: &LayerNorm,
    grad: Option<&mut LayerNorm>,
) -> Array2<f64> {
    if let Some(g) = grad {
        g.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        g.beta += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols() as f64;
    let mut dx = &dy * &ln.gamma;
    for ((mut row, xhat), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
        let mean_dxhat = row.sum() / d;
        let mean_dxhat_xhat = row.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d;
        for (v, &xh) in row.iter_mut().zip(xhat) {
            *v = r * (*v - mean_dxhat - xh * mean_dxhat_xhat);
        }
    }
    dx
}

/// Activations kept for the backward pass of one block.
///
/// Only rows `from..S` are propagated through the block; earlier rows
/// contribute keys and values. `from = 0` is the ordinary full pass.
#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    from: usize,
    ln1: LnCache,
    h: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    q_low: Option<Array2<f64>>,
    v_low: Option<Array2<f64>>,
    ln2: LnCache,
    h2: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
}

impl BlockCache {
    pub(crate) fn from_row(&self) -> usize {
        self.from
    }

    pub(crate) fn rows(&self) -> usize {
        self.h.nrows()
    }
}

pub(crate) struct BlockGradRequest<'a> {
    pub block: Option<&'a mut Block>,
    pub adapter: Option<&'a mut BlockAdapters>,
}

pub(crate) fn block_forward(
    x: ArrayView2<f64>,
    from: usize,
    block: &Block,
    adapter: Option<(&BlockAdapters, f64)>,
    heads: usize,
) -> (Array2<f64>, BlockCache) {
    let seq = x.nrows();
    let d = x.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (h, ln1) = layer_norm(x, &block.ln1);
    let h_act = h.slice(s![from.., ..]);
    let mut q = linear(h_act, &block.wq);
    let k = linear(h.view(), &block.wk);
    let mut v = linear(h.view(), &block.wv);
    let mut q_low = None;
    let mut v_low = None;
    if let Some((ad, lscale)) = adapter {
        let ql = h_act.dot(&ad.query.a);
        q.scaled_add(lscale, &ql.dot(&ad.query.b));
        q_low = Some(ql);
        let vl = h.dot(&ad.value.a);
        v.scaled_add(lscale, &vl.dot(&ad.value.b));
        v_low = Some(vl);
    }

    let rows = seq - from;
    let mut ctx = Array2::zeros((rows, d));
    let mut probs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let cols = s![.., hd * dh..(hd + 1) * dh];
        let mut att = q.slice(cols).dot(&k.slice(cols).t());
        for (ii, mut row) in att.rows_mut().into_iter().enumerate() {
            let visible = from + ii + 1;
            let mut max = f64::NEG_INFINITY;
            for v in row.iter_mut().take(visible) {
                *v *= scale;
                max = max.max(*v);
            }
            let mut sum = 0.0;
            for v in row.iter_mut().take(visible) {
                *v = (*v - max).exp();
                sum += *v;
            }
            for (j, v) in row.iter_mut().enumerate() {
                if j < visible {
                    *v /= sum;
                } else {
                    *v = 0.0;
                }
            }
        }
        ctx.slice_mut(cols).assign(&att.dot(&v.slice(cols)));
        probs.push(att);
    }

    let mut x1 = linear(ctx.view(), &block.wo);
    x1 += &x.slice(s![from.., ..]);
    let (h2, ln2) = layer_norm(x1.view(), &block.ln2);
    let z1 = linear(h2.view(), &block.fc1);
    let a1 = z1.mapv(gelu);
    let mut out = linear(a1.view(), &block.fc2);
    out += &x1;

    let cache = BlockCache {
        from,
        ln1,
        h,
        q,
        k,
        v,
        probs,
        ctx,
        q_low,
        v_low,
        ln2,
        h2,
        z1,
        a1,
    };
    (out, cache)
}

/// Backpropagates `d_out` (rows `from..S`) through a block, returning the
/// gradient for all `S` input rows.
pub(crate) fn block_backward(
    d_out: ArrayView2<f64>,
    cache: &BlockCache,
    block: &Block,
    adapter: Option<(&BlockAdapters, f64)>,
    heads: usize,
    mut req: BlockGradRequest<'_>,
) -> Array2<f64> {
    let from = cache.from;
    let seq = cache.h.nrows();
    let d = cache.h.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // MLP branch
    let d_a1 = linear_backward(
        cache.a1.view(),
        d_out,
        &block.fc2,
        req.block.as_deref_mut().map(|b| &mut b.fc2),
    );
    let d_z1 = &d_a1 * &cache.z1.mapv(gelu_grad);
    let d_h2 = linear_backward(
        cache.h2.view(),
        d_z1.view(),
        &block.fc1,
        req.block.as_deref_mut().map(|b| &mut b.fc1),
    );
    let mut d_x1 = layer_norm_backward(
        d_h2.view(),
        &cache.ln2,
        &block.ln2,
        req.block.as_deref_mut().map(|b| &mut b.ln2),
    );
    d_x1 += &d_out;

    // attention branch
    let d_ctx = linear_backward(
        cache.ctx.view(),
        d_x1.view(),
        &block.wo,
        req.block.as_deref_mut().map(|b| &mut b.wo),
    );
    let rows = seq - from;
    let mut d_q = Array2::zeros((rows, d));
    let mut d_k = Array2::zeros((seq, d));
    let mut d_v = Array2::zeros((seq, d));
    for hd in 0..heads {
        let cols = s![.., hd * dh..(hd + 1) * dh];
        let p = &cache.probs[hd];
        let d_ctx_h = d_ctx.slice(cols);
        let d_p = d_ctx_h.dot(&cache.v.slice(cols).t());
        d_v.slice_mut(cols).assign(&p.t().dot(&d_ctx_h));
        let mut d_att = d_p;
        for (mut drow, prow) in d_att.rows_mut().into_iter().zip(p.rows()) {
            let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
            for (dv, &pv) in drow.iter_mut().zip(prow) {
                *dv = pv * (*dv - dot) * scale;
            }
        }
        d_q.slice_mut(cols).assign(&d_att.dot(&cache.k.slice(cols)));
        d_k.slice_mut(cols).assign(&d_att.t().dot(&cache.q.slice(cols)));
    }

    let h_act = cache.h.slice(s![from.., ..]);
    let mut d_h = linear_backward(
        cache.h.view(),
        d_k.view(),
        &block.wk,
        req.block.as_deref_mut().map(|b| &mut b.wk),
    );
    d_h += &linear_backward(
        cache.h.view(),
        d_v.view(),
        &block.wv,
        req.block.as_deref_mut().map(|b| &mut b.wv),
    );
    let d_h_q = linear_backward(h_act, d_q.view(), &block.wq, req.block.as_deref_mut().map(|b| &mut b.wq));
    d_h.slice_mut(s![from.., ..]).scaled_add(1.0, &d_h_q);

    if let Some((ad, lscale)) = adapter {
        let q_low = cache.q_low.as_ref().expect("adapter cache");
        let v_low = cache.v_low.as_ref().expect("adapter cache");
        let d_q_low = d_q.dot(&ad.query.b.t()) * lscale;
        let d_v_low = d_v.dot(&ad.value.b.t()) * lscale;
        if let Some(g) = req.adapter.as_deref_mut() {
            general_mat_mul(lscale, &q_low.t(), &d_q, 1.0, &mut g.query.b);
            general_mat_mul(1.0, &h_act.t(), &d_q_low, 1.0, &mut g.query.a);
            general_mat_mul(lscale, &v_low.t(), &d_v, 1.0, &mut g.value.b);
            general_mat_mul(1.0, &cache.h.t(), &d_v_low, 1.0, &mut g.value.a);
        }
        d_h.slice_mut(s![from.., ..]).scaled_add(1.0, &d_q_low.dot(&ad.query.a.t()));
        d_h.scaled_add(1.0, &d_v_low.dot(&ad.value.a.t()));
    }

    let mut d_x = layer_norm_backward(
        d_h.view(),
        &cache.ln1,
        &block.ln1,
        req.block.as_deref_mut().map(|b| &mut b.ln1),
    );
    d_x.slice_mut(s![from.., ..]).scaled_add(1.0, &d_x1);
    d_x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &z in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(z + h) - gelu(z - h)) / (2.0 * h);
            assert!((fd - gelu_grad(z)).abs() < 1e-8, "z={z}");
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let x = ndarray::array![[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 0.0, 5.0]];
        let (y, _) = layer_norm(x.view(), &LayerNorm::identity(4));
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
