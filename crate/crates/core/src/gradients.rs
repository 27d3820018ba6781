//! Input gradients through the product of layer Jacobians, a finite-difference
//! oracle, and reverse-mode parameter gradients for training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Activation, AffineSigmaMap, ResNetModel, ResidualLayer};
use crate::numerics::{Mat64, Vec64};

/// `D = ε·I + δ·∂f` together with the raw branch Jacobian `∂f = W̃ σ′(a) W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerJacobian {
    pub d: Mat64,
    pub raw_df: Mat64,
}

impl LayerJacobian {
    pub fn new(eps: f64, delta: f64, raw_df: Mat64) -> Self {
        let mut d = raw_df.scaled(delta);
        for i in 0..d.rows() {
            d[(i, i)] += eps;
        }
        LayerJacobian { d, raw_df }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputGradient {
    pub grad: Vec64,
    pub per_layer: Vec<LayerJacobian>,
}

/// Layer Jacobians along the trace of `x`.
pub fn layer_jacobians(model: &ResNetModel, x: &[f64]) -> Result<Vec<LayerJacobian>> {
    let (_, trace) = model.forward(x)?;
    Ok(model
        .layers
        .iter()
        .zip(&trace.preacts)
        .map(|(layer, a)| LayerJacobian::new(model.eps, model.delta, layer.jacobian_from_preact(a)))
        .collect())
}

/// `∇_x Φ(x)` for a scalar model.
pub fn input_gradient(model: &ResNetModel, x: &[f64]) -> Result<InputGradient> {
    if model.n_out() != 1 {
        return Err(Error::InvalidArgument(format!(
            "input_gradient needs a scalar model ({} outputs); use input_gradient_row",
            model.n_out()
        )));
    }
    input_gradient_row(model, x, 0)
}

/// Gradient of output component `row`: `[∂λ̃_row · D_L ⋯ D_1 · ∂λ]ᵀ`.
pub fn input_gradient_row(model: &ResNetModel, x: &[f64], row: usize) -> Result<InputGradient> {
    if row >= model.n_out() {
        return Err(Error::InvalidArgument(format!("output row {row} out of range ({})", model.n_out())));
    }
    let (_, trace) = model.forward(x)?;
    let per_layer: Vec<LayerJacobian> = model
        .layers
        .iter()
        .zip(&trace.preacts)
        .map(|(layer, a)| LayerJacobian::new(model.eps, model.delta, layer.jacobian_from_preact(a)))
        .collect();

    // Row vector times matrices from the output side inwards.
    let out = &model.output;
    let d_out = out.act_deriv(&trace.output_preact);
    let mut r: Vec64 = Vec64(out.w_tilde.row(row).iter().zip(&d_out).map(|(a, b)| a * b).collect());
    r = out.w.vecmat(&r);
    for lj in per_layer.iter().rev() {
        r = lj.d.vecmat(&r);
    }
    let inp = &model.input;
    let d_in = inp.act_deriv(&trace.input_preact);
    let r = inp.w_tilde.vecmat(&r);
    let r: Vec<f64> = r.iter().zip(&d_in).map(|(a, b)| a * b).collect();
    let grad = inp.w.vecmat(&r);
    grad.check_finite("input gradient")?;
    Ok(InputGradient { grad, per_layer })
}

/// Plain central differences `(Φ(x+he_i) − Φ(x−he_i)) / 2h`.
pub fn fd_gradient_central(f: &dyn Fn(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec64> {
    let mut xp = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp)?;
        xp[i] = x[i] - h;
        let fm = f(&xp)?;
        xp[i] = x[i];
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(Vec64(g))
}

/// Central-difference gradient of a scalar model.
///
/// Differences at `h` and `h/2` are compared; when they disagree beyond
/// roundoff level the Richardson combination `(4·D(h/2) − D(h))/3` is returned,
/// which cancels the `O(h²)` truncation term.
pub fn fd_gradient(model: &ResNetModel, x: &[f64], h: f64) -> Result<Vec64> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let f = |p: &[f64]| model.eval_scalar(p);
    let d1 = fd_gradient_central(&f, x, h)?;
    let d2 = fd_gradient_central(&f, x, 0.5 * h)?;
    let scale = d1.norm_inf().max(1e-300);
    if d1.sub(&d2).norm_inf() <= 1e-10 * scale {
        return Ok(d1);
    }
    Ok(Vec64(d1.iter().zip(d2.iter()).map(|(a, b)| (4.0 * b - a) / 3.0).collect()))
}

/// Training losses (averaged over the batch).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Mse,
    Bce,
}

/// Offsets of one transform or layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockOffsets {
    pub w: usize,
    pub w_tilde: usize,
    pub b: usize,
    pub b_tilde: usize,
    pub end: usize,
}

impl BlockOffsets {
    fn build(start: usize, w: &Mat64, w_tilde: &Mat64) -> Self {
        let w_off = start;
        let wt_off = w_off + w.data().len();
        let b_off = wt_off + w_tilde.data().len();
        let bt_off = b_off + w.rows();
        let end = bt_off + w_tilde.rows();
        BlockOffsets { w: w_off, w_tilde: wt_off, b: b_off, b_tilde: bt_off, end }
    }
}

/// Flat parameter order: λ, layers 1…L, λ̃; within a block W, W̃, b, b̃ (row-major).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub input: BlockOffsets,
    pub layers: Vec<BlockOffsets>,
    pub output: BlockOffsets,
}

impl ParamLayout {
    pub fn of(model: &ResNetModel) -> Self {
        let input = BlockOffsets::build(0, &model.input.w, &model.input.w_tilde);
        let mut at = input.end;
        let layers = model
            .layers
            .iter()
            .map(|l| {
                let o = BlockOffsets::build(at, &l.w, &l.w_tilde);
                at = o.end;
                o
            })
            .collect();
        let output = BlockOffsets::build(at, &model.output.w, &model.output.w_tilde);
        ParamLayout { input, layers, output }
    }

    pub fn len(&self) -> usize {
        self.output.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn write_block(out: &mut [f64], o: &BlockOffsets, w: &Mat64, wt: &Mat64, b: &Vec64, bt: &Vec64) {
    out[o.w..o.w_tilde].copy_from_slice(w.data());
    out[o.w_tilde..o.b].copy_from_slice(wt.data());
    out[o.b..o.b_tilde].copy_from_slice(b);
    out[o.b_tilde..o.end].copy_from_slice(bt);
}

fn read_block(src: &[f64], o: &BlockOffsets, w: &mut Mat64, wt: &mut Mat64, b: &mut Vec64, bt: &mut Vec64) {
    w.data_mut().copy_from_slice(&src[o.w..o.w_tilde]);
    wt.data_mut().copy_from_slice(&src[o.w_tilde..o.b]);
    b.copy_from_slice(&src[o.b..o.b_tilde]);
    bt.copy_from_slice(&src[o.b_tilde..o.end]);
}

/// All trainable scalars of `model` in [`ParamLayout`] order.
pub fn flatten_params(model: &ResNetModel) -> Vec<f64> {
    let layout = ParamLayout::of(model);
    let mut out = vec![0.0; layout.len()];
    let m = &model.input;
    write_block(&mut out, &layout.input, &m.w, &m.w_tilde, &m.b, &m.b_tilde);
    for (l, o) in model.layers.iter().zip(&layout.layers) {
        write_block(&mut out, o, &l.w, &l.w_tilde, &l.b, &l.b_tilde);
    }
    let m = &model.output;
    write_block(&mut out, &layout.output, &m.w, &m.w_tilde, &m.b, &m.b_tilde);
    out
}

/// Inverse of [`flatten_params`].
pub fn unflatten_params(model: &mut ResNetModel, params: &[f64]) -> Result<()> {
    let layout = ParamLayout::of(model);
    if params.len() != layout.len() {
        return Err(Error::Dimension(format!("{} parameters for a model with {}", params.len(), layout.len())));
    }
    if let Some(i) = params.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("parameter {i} is {}", params[i])));
    }
    let m = &mut model.input;
    read_block(params, &layout.input, &mut m.w, &mut m.w_tilde, &mut m.b, &mut m.b_tilde);
    for (l, o) in model.layers.iter_mut().zip(&layout.layers) {
        read_block(params, o, &mut l.w, &mut l.w_tilde, &mut l.b, &mut l.b_tilde);
    }
    let m = &mut model.output;
    read_block(params, &layout.output, &mut m.w, &mut m.w_tilde, &mut m.b, &mut m.b_tilde);
    Ok(())
}

/// Mean loss and its gradient in [`ParamLayout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `log(1 + e^y)` without overflow.
pub(crate) fn softplus(y: f64) -> f64 {
    if y > 0.0 {
        y + (-y).exp().ln_1p()
    } else {
        y.exp().ln_1p()
    }
}

/// BCE needs `λ̃ = σ(W h + b)` with sigmoid and a trivial tilde stage.
pub(crate) fn check_bce_output(out: &AffineSigmaMap) -> Result<()> {
    let trivial_tilde = out.w_tilde.shape() == (1, 1) && out.w_tilde[(0, 0)] == 1.0 && out.b_tilde[0] == 0.0;
    if out.affine_only || out.act != Activation::Sigmoid || !trivial_tilde {
        return Err(Error::InvalidConfig("bce loss needs a sigmoid output map σ(W h + b) with W̃ = 1, b̃ = 0".into()));
    }
    Ok(())
}

/// Loss value and `∂loss/∂z` for one sample, where `z` is the output pre-activation
/// (bce) and the returned gradient is with respect to `y` (mse).
pub(crate) fn sample_loss(loss: Loss, y: f64, z: f64, target: f64) -> (f64, f64) {
    match loss {
        Loss::Mse => ((y - target).powi(2), 2.0 * (y - target)),
        Loss::Bce => {
            // −[t log σ(z) + (1 − t) log(1 − σ(z))] = t·softplus(−z) + (1 − t)·softplus(z)
            let l = target * softplus(-z) + (1.0 - target) * softplus(z);
            (l, Activation::Sigmoid.eval(z) - target)
        }
    }
}

/// Backward through `x ↦ W̃ σ(a) + b̃`, `a = W x + b`, given `∂/∂a`; accumulates W, b grads, returns `∂/∂x`.
pub(crate) fn back_from_preact(g_a: &[f64], x: &[f64], w: &Mat64, grad: &mut [f64], o_w: usize, o_b: usize) -> Vec64 {
    let n = w.cols();
    for (i, gi) in g_a.iter().enumerate() {
        if *gi == 0.0 {
            continue;
        }
        for (j, xj) in x.iter().enumerate() {
            grad[o_w + i * n + j] += gi * xj;
        }
        grad[o_b + i] += gi;
    }
    w.vecmat(g_a)
}

/// Backward through the tilde stage: given `∂/∂out`, accumulates W̃, b̃ grads and returns `∂/∂a`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn back_through_tilde(
    g_out: &[f64],
    s: &[f64],
    a_deriv: &[f64],
    w_tilde: &Mat64,
    grad: &mut [f64],
    o_wt: usize,
    o_bt: usize,
) -> Vec<f64> {
    let m = w_tilde.cols();
    for (i, gi) in g_out.iter().enumerate() {
        if *gi == 0.0 {
            continue;
        }
        for (j, sj) in s.iter().enumerate() {
            grad[o_wt + i * m + j] += gi * sj;
        }
        grad[o_bt + i] += gi;
    }
    let g_s = w_tilde.vecmat(g_out);
    g_s.iter().zip(a_deriv).map(|(g, d)| g * d).collect()
}

fn map_activation_values(map: &AffineSigmaMap, a: &[f64]) -> Vec<f64> {
    if map.affine_only {
        a.to_vec()
    } else {
        a.iter().map(|&y| map.act.eval(y)).collect()
    }
}

/// Backward through λ̃ given the per-sample loss derivative `g` from [`sample_loss`];
/// returns `∂/∂z` at the output pre-activation.
pub(crate) fn back_output_stage(out: &AffineSigmaMap, o: &BlockOffsets, loss: Loss, g: f64, z: &[f64], grad: &mut [f64]) -> Vec<f64> {
    match loss {
        Loss::Bce => {
            // With p = W̃σ(z) + b̃ at W̃ = 1, b̃ = 0: ∂L/∂p = (p − t)/(p(1 − p)).
            let p = out.act.eval(z[0]);
            let q = out.act.eval(-z[0]);
            let dp = g / (p * q).max(f64::MIN_POSITIVE);
            grad[o.w_tilde] += dp * p;
            grad[o.b_tilde] += dp;
            vec![g]
        }
        Loss::Mse => {
            let s = map_activation_values(out, z);
            let d = out.act_deriv(z);
            back_through_tilde(&[g], &s, &d, &out.w_tilde, grad, o.w_tilde, o.b_tilde)
        }
    }
}

/// Backward through λ given `∂/∂h_0`.
pub(crate) fn back_input_stage(inp: &AffineSigmaMap, o: &BlockOffsets, g_h: &[f64], x: &[f64], a0: &[f64], grad: &mut [f64]) {
    let s = map_activation_values(inp, a0);
    let d = inp.act_deriv(a0);
    let g_a = back_through_tilde(g_h, &s, &d, &inp.w_tilde, grad, o.w_tilde, o.b_tilde);
    back_from_preact(&g_a, x, &inp.w, grad, o.w, o.b);
}

/// Backward through a residual update `h_l = ε h + δ f(h)` given `∂/∂h_l`.
pub(crate) fn back_residual(
    layer: &ResidualLayer,
    eps: f64,
    delta: f64,
    h_prev: &[f64],
    a: &[f64],
    g_next: &[f64],
    o: &BlockOffsets,
    grad: &mut [f64],
) -> Vec64 {
    let g_f: Vec<f64> = g_next.iter().map(|g| delta * g).collect();
    let s: Vec<f64> = a.iter().map(|&y| layer.act.eval(y)).collect();
    let d: Vec<f64> = a.iter().map(|&y| layer.act.deriv(y)).collect();
    let g_a = back_through_tilde(&g_f, &s, &d, &layer.w_tilde, grad, o.w_tilde, o.b_tilde);
    let mut g_h = back_from_preact(&g_a, h_prev, &layer.w, grad, o.w, o.b);
    for (gh, gn) in g_h.iter_mut().zip(g_next) {
        *gh += eps * gn;
    }
    g_h
}

/// Exact gradient of the mean loss over `batch` with respect to every parameter.
///
/// Samples are processed sequentially so the floating-point summation order is
/// fixed and repeated calls are bitwise identical.
pub fn param_gradient(model: &ResNetModel, batch: &[(Vec64, f64)], loss: Loss) -> Result<ParamGradient> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("param_gradient on an empty batch".into()));
    }
    if model.n_out() != 1 {
        return Err(Error::InvalidArgument("param_gradient supports scalar models only".into()));
    }
    if loss == Loss::Bce {
        check_bce_output(&model.output)?;
        if let Some((_, t)) = batch.iter().find(|(_, t)| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidArgument(format!("bce target {t} outside [0, 1]")));
        }
    }
    let layout = ParamLayout::of(model);
    let mut grad = vec![0.0; layout.len()];
    let inv_n = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (x, target) in batch {
        let (y, trace) = model.forward(x)?;
        let z = trace.output_preact[0];
        let (l, g) = sample_loss(loss, y[0], z, *target);
        total += l;
        let g = g * inv_n;

        let h_last = trace.states.last().expect("trace has h_0");
        let g_z = back_output_stage(&model.output, &layout.output, loss, g, &trace.output_preact, &mut grad);
        let mut g_h = back_from_preact(&g_z, h_last, &model.output.w, &mut grad, layout.output.w, layout.output.b);
        for (li, layer) in model.layers.iter().enumerate().rev() {
            g_h = back_residual(
                layer,
                model.eps,
                model.delta,
                &trace.states[li],
                &trace.preacts[li],
                &g_h,
                &layout.layers[li],
                &mut grad,
            );
        }
        back_input_stage(&model.input, &layout.input, &g_h, x, &trace.input_preact, &mut grad);
    }
    let loss_value = total * inv_n;
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss_value}")));
    }
    Ok(ParamGradient { loss: loss_value, grad })
}

/// Mean loss without gradients.
pub fn batch_loss(model: &ResNetModel, batch: &[(Vec64, f64)], loss: Loss) -> Result<f64> {
    let mut total = 0.0;
    for (x, t) in batch {
        let (y, trace) = model.forward(x)?;
        total += sample_loss(loss, y[0], trace.output_preact[0], *t).0;
    }
    Ok(total / batch.len() as f64)
}
