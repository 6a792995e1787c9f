//! Column-batched network math.
//!
//! Everything here works on `(features x batch)` matrices so the per-layer
//! work becomes a handful of GEMM calls instead of per-sample loops. Shapes
//! are guaranteed by `Mlp`'s construction invariants; callers are inside the
//! crate and pass matching batch widths.

use super::{param_offsets, Mlp};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2};

/// How much derivative information the forward pass should retain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum DerivOrder {
    /// Activations only.
    Value,
    /// Activations plus first derivatives (enough for backprop).
    First,
    /// Activations plus first and second derivatives (double backprop).
    Second,
}

/// Intermediates retained by [`forward`].
pub(crate) struct ForwardCache {
    /// `a[0]` is the input batch; `a[k+1]` the post-activation output of
    /// layer `k`.
    pub(crate) a: Vec<Array2<f64>>,
    /// First derivative of layer `k`'s activation at its pre-activation.
    pub(crate) d1: Vec<Array2<f64>>,
    /// Second derivative, only filled at `DerivOrder::Second`.
    pub(crate) d2: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub(crate) fn output(&self) -> &Array2<f64> {
        self.a.last().expect("cache always holds the input")
    }
}

pub(crate) fn forward(net: &Mlp, x: ArrayView2<f64>, order: DerivOrder) -> ForwardCache {
    let n_layers = net.n_layers();
    debug_assert_eq!(x.nrows(), net.input_dim());
    let mut a: Vec<Array2<f64>> = Vec::with_capacity(n_layers + 1);
    let mut d1: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
    let mut d2: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
    a.push(x.to_owned());
    for k in 0..n_layers {
        let mut z = affine(net.weight(k), net.bias(k), &a[k]);
        let act = net.layer_activation(k);
        match order {
            DerivOrder::Value => {
                for v in slice_mut(&mut z) {
                    *v = act.eval(*v);
                }
            }
            DerivOrder::First => {
                let mut dk = Array2::zeros(z.dim());
                for (v, d) in slice_mut(&mut z).iter_mut().zip(slice_mut(&mut dk)) {
                    let (y, dy) = act.eval_d1(*v);
                    *v = y;
                    *d = dy;
                }
                d1.push(dk);
            }
            DerivOrder::Second => {
                let mut dk = Array2::zeros(z.dim());
                let mut dk2 = Array2::zeros(z.dim());
                {
                    let ds = slice_mut(&mut dk);
                    let ds2 = slice_mut(&mut dk2);
                    for (i, v) in slice_mut(&mut z).iter_mut().enumerate() {
                        let (y, dy, ddy) = act.eval_d1_d2(*v);
                        *v = y;
                        ds[i] = dy;
                        ds2[i] = ddy;
                    }
                }
                d1.push(dk);
                d2.push(dk2);
            }
        }
        a.push(z);
    }
    ForwardCache { a, d1, d2 }
}

/// Backprop an output cotangent batch to the input batch. Needs a cache of
/// at least `DerivOrder::First`.
pub(crate) fn input_grad(net: &Mlp, cache: &ForwardCache, vbar: ArrayView2<f64>) -> Array2<f64> {
    let mut abar = vbar.to_owned();
    for k in (0..net.n_layers()).rev() {
        abar *= &cache.d1[k];
        abar = mat_t_mul(net.weight(k), &abar);
    }
    abar
}

pub(crate) struct BackpropOut {
    /// Parameter cotangent in flat layout, summed over the batch.
    pub(crate) theta: Vec<f64>,
    /// Input cotangent batch, if requested.
    pub(crate) input: Option<Array2<f64>>,
}

/// Backprop an output cotangent batch to the parameters (and optionally the
/// input). Per-sample parameter cotangents are summed; scale the cotangents
/// beforehand if a mean is wanted.
pub(crate) fn backprop(
    net: &Mlp,
    cache: &ForwardCache,
    vbar: ArrayView2<f64>,
    want_input: bool,
) -> BackpropOut {
    let dims = net.layer_dims();
    let (w_off, b_off) = param_offsets(dims);
    let mut theta = vec![0.0; net.param_len()];
    let mut abar = vbar.to_owned();
    for k in (0..net.n_layers()).rev() {
        abar *= &cache.d1[k];
        add_weight_grad(&mut theta, w_off[k], dims[k + 1], dims[k], &abar, &cache.a[k]);
        add_bias_grad(&mut theta, b_off[k], &abar);
        if k == 0 && !want_input {
            break;
        }
        abar = mat_t_mul(net.weight(k), &abar);
    }
    BackpropOut {
        theta,
        input: want_input.then_some(abar),
    }
}

/// Everything [`grad_vjp`] can produce in one fused pass.
pub(crate) struct GradVjpOut {
    /// Input gradient `grad_x y` per sample, if requested.
    pub(crate) grad: Option<Array2<f64>>,
    /// `d phi / dx` per sample.
    pub(crate) x_cot: Array2<f64>,
    /// `d phi / d theta` summed over the batch, if requested.
    pub(crate) theta_cot: Option<Vec<f64>>,
}

/// Double backprop for scalar-output networks, batched.
///
/// Forward-mode pass along direction `v` computes `phi = v . grad_x y`
/// per column; a reverse pass over both the primal and tangent variables
/// then yields `d phi/dx` (and `d phi/d theta`, and — because
/// `d phi/dv = grad_x y` falls out of the same recursion — the plain input
/// gradient at no extra cost).
pub(crate) fn grad_vjp(
    net: &Mlp,
    x: ArrayView2<f64>,
    v: ArrayView2<f64>,
    want_grad: bool,
    want_theta: bool,
) -> GradVjpOut {
    let n_layers = net.n_layers();
    let dims = net.layer_dims();
    let bsz = x.ncols();
    debug_assert_eq!(net.output_dim(), 1);
    debug_assert_eq!(v.dim(), x.dim());

    let cache = forward(net, x, DerivOrder::Second);

    // Tangent forward: t[0] = v, zdot[k] = W_k t[k], t[k+1] = d1[k] * zdot[k].
    let mut t: Vec<Array2<f64>> = Vec::with_capacity(n_layers + 1);
    let mut zdot: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
    t.push(v.to_owned());
    for k in 0..n_layers {
        let zd = mat_mul(net.weight(k), &t[k]);
        t.push(&cache.d1[k] * &zd);
        zdot.push(zd);
    }

    // Reverse pass, seeded with cotangent 1 on each sample's phi.
    let (w_off, b_off) = param_offsets(dims);
    let mut theta = if want_theta {
        Some(vec![0.0; net.param_len()])
    } else {
        None
    };
    let mut tbar: Array2<f64> = Array2::ones((1, bsz));
    let mut abar: Array2<f64> = Array2::zeros((1, bsz));
    for k in (0..n_layers).rev() {
        // zdot_bar = d1 * tbar; zbar = d2 * zdot * tbar + d1 * abar.
        let rows = dims[k + 1];
        let mut zdot_bar = Array2::zeros((rows, bsz));
        let mut zbar = Array2::zeros((rows, bsz));
        {
            let d1s = slice_of(&cache.d1[k]);
            let d2s = slice_of(&cache.d2[k]);
            let zds = slice_of(&zdot[k]);
            let tbs = slice_of(&tbar);
            let abs_ = slice_of(&abar);
            let zdb = slice_mut(&mut zdot_bar);
            let zb = slice_mut(&mut zbar);
            for i in 0..zb.len() {
                zdb[i] = d1s[i] * tbs[i];
                zb[i] = d2s[i] * zds[i] * tbs[i] + d1s[i] * abs_[i];
            }
        }
        if let Some(th) = theta.as_mut() {
            // W_k enters both the primal and tangent passes, so its
            // cotangent has two rank-batch pieces.
            add_weight_grad(th, w_off[k], rows, dims[k], &zbar, &cache.a[k]);
            add_weight_grad(th, w_off[k], rows, dims[k], &zdot_bar, &t[k]);
            add_bias_grad(th, b_off[k], &zbar);
        }
        if k > 0 || want_grad {
            tbar = mat_t_mul(net.weight(k), &zdot_bar);
        }
        abar = mat_t_mul(net.weight(k), &zbar);
    }

    GradVjpOut {
        grad: want_grad.then_some(tbar),
        x_cot: abar,
        theta_cot: theta,
    }
}

/// `z = W a + b` with the bias broadcast across columns.
pub(crate) fn affine(w: &Array2<f64>, b: &Array1<f64>, a: &Array2<f64>) -> Array2<f64> {
    let mut z = Array2::zeros((w.nrows(), a.ncols()));
    general_mat_mul(1.0, w, a, 0.0, &mut z);
    for (mut row, &bv) in z.outer_iter_mut().zip(b.iter()) {
        for x in row.iter_mut() {
            *x += bv;
        }
    }
    z
}

fn mat_mul(w: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((w.nrows(), a.ncols()));
    general_mat_mul(1.0, w, a, 0.0, &mut out);
    out
}

fn mat_t_mul(w: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((w.ncols(), a.ncols()));
    general_mat_mul(1.0, &w.t(), a, 0.0, &mut out);
    out
}

fn add_weight_grad(
    theta: &mut [f64],
    offset: usize,
    rows: usize,
    cols: usize,
    zbar: &Array2<f64>,
    a_in: &Array2<f64>,
) {
    let mut view = ArrayViewMut2::from_shape((rows, cols), &mut theta[offset..offset + rows * cols])
        .expect("offset table matches layer shapes");
    general_mat_mul(1.0, zbar, &a_in.t(), 1.0, &mut view);
}

fn add_bias_grad(theta: &mut [f64], offset: usize, zbar: &Array2<f64>) {
    for (dst, row) in theta[offset..offset + zbar.nrows()]
        .iter_mut()
        .zip(zbar.outer_iter())
    {
        *dst += row.sum();
    }
}

fn slice_of(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("arrays built here are standard layout")
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut()
        .expect("arrays built here are standard layout")
}
