//! Datasets, initialisation, Adam and the training loops for the 1-D
//! regression and 2-D classification setups.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::{
    back_from_preact, back_input_stage, back_output_stage, back_through_tilde, check_bce_output, flatten_params,
    param_gradient, sample_loss, unflatten_params, Loss, ParamLayout,
};
use crate::models::{Activation, AffineSigmaMap, ResNetModel, ResidualLayer};
use crate::numerics::{BoxDomain, Mat64, Vec64};
use crate::rng::{derive_seed, rng_for, Rng};

/// Classification points with `|Ψ(x) − 0.5|` below this are redrawn.
pub const MARGIN_BAND: f64 = 0.05;
/// Classification label threshold on `Ψ`.
pub const LABEL_LEVEL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Quad1D,
    Circle2D,
    Xor2D,
}

impl DatasetKind {
    pub fn is_classification(self) -> bool {
        !matches!(self, DatasetKind::Quad1D)
    }

    pub fn loss(self) -> Loss {
        if self.is_classification() {
            Loss::Bce
        } else {
            Loss::Mse
        }
    }

    pub fn domain(self) -> BoxDomain {
        match self {
            DatasetKind::Quad1D => BoxDomain { lo: vec![-1.0], hi: vec![1.0] },
            _ => BoxDomain { lo: vec![-2.5; 2], hi: vec![2.5; 2] },
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "quad1d" | "quad" => Ok(DatasetKind::Quad1D),
            "circle2d" | "circle" => Ok(DatasetKind::Circle2D),
            "xor2d" | "xor" => Ok(DatasetKind::Xor2D),
            other => Err(Error::InvalidConfig(format!("unknown dataset kind '{other}'"))),
        }
    }
}

pub fn psi_circ(x: &[f64]) -> f64 {
    x[0] * x[0] + x[1] * x[1] - 0.5
}

pub fn psi_xor(x: &[f64]) -> f64 {
    x[1] * x[1] - x[0] * x[0] - 0.5
}

/// `Σ (x_j − z_j)²`, a quadratic with its only critical point at `z`.
pub fn psi_z(x: &[f64], z: &[f64]) -> f64 {
    x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec64>,
    pub targets: Vec<f64>,
    pub kind: DatasetKind,
    pub domain: BoxDomain,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.targets.iter().map(|&t| t > 0.5).collect()
    }

    pub fn pairs(&self) -> Vec<(Vec64, f64)> {
        self.inputs.iter().cloned().zip(self.targets.iter().copied()).collect()
    }

    /// x columns then the target, with a header row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.domain.dim();
        let mut header: Vec<String> = (0..n).map(|j| format!("x{}", j + 1)).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for (x, t) in self.inputs.iter().zip(&self.targets) {
            let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            row.push(t.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, kind: DatasetKind) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let domain = kind.domain();
        let n = domain.dim();
        let (mut inputs, mut targets) = (Vec::new(), Vec::new());
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != n + 1 {
                return Err(Error::InvalidConfig(format!("dataset row {} has {} columns, expected {}", i + 1, rec.len(), n + 1)));
            }
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::InvalidConfig(format!("dataset row {}: {e}", i + 1))))
                .collect::<Result<_>>()?;
            targets.push(vals[n]);
            inputs.push(Vec64(vals[..n].to_vec()));
        }
        Ok(Dataset { inputs, targets, kind, domain })
    }
}

/// Draws `n` points for `kind` from a generator seeded with `seed`.
pub fn make_dataset(kind: DatasetKind, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one point".into()));
    }
    let mut rng = rng_for(seed, 0);
    let domain = kind.domain();
    let (mut inputs, mut targets) = (Vec::with_capacity(n), Vec::with_capacity(n));
    match kind {
        DatasetKind::Quad1D => {
            let u = Uniform::new(-1.0, 1.0).expect("valid range");
            for _ in 0..n {
                let x: f64 = u.sample(&mut rng);
                inputs.push(Vec64(vec![x]));
                targets.push(x * x);
            }
        }
        DatasetKind::Circle2D | DatasetKind::Xor2D => {
            let psi = if kind == DatasetKind::Circle2D { psi_circ } else { psi_xor };
            let u = Uniform::new(-2.5, 2.5).expect("valid range");
            while inputs.len() < n {
                let x = vec![u.sample(&mut rng), u.sample(&mut rng)];
                let p = psi(&x);
                if (p - LABEL_LEVEL).abs() < MARGIN_BAND {
                    continue;
                }
                targets.push(if p > LABEL_LEVEL { 1.0 } else { 0.0 });
                inputs.push(Vec64(x));
            }
        }
    }
    Ok(Dataset { inputs, targets, kind, domain })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps_hat: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != grads.len() || params.len() != grads.len() {
        return Err(Error::Dimension(format!(
            "adam state has {} slots, params {}, grads {}",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..grads.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps_hat);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    /// `λ = id`, requires `n_in = n_hid`.
    Identity,
    /// `λ(x) = tanh(W₀x + b₀)`.
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    /// `λ̃(y) = W y + b`.
    Affine,
    /// `λ̃(y) = sigmoid(W y + b)`.
    Sigmoid,
}

/// Shape of a trainable model; residual branches are `tanh(W h + b)` with `W̃ = I`, `b̃ = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Skeleton {
    pub eps: f64,
    pub delta: f64,
    pub depth: usize,
    pub n_in: usize,
    pub n_hid: usize,
    pub activation: Activation,
    pub input: InputKind,
    pub output: OutputKind,
}

impl Skeleton {
    /// The 1-D regression model `W̃(h_L) + b̃` on `h_0 = x`.
    pub fn quad1d(eps: f64, delta: f64, depth: usize) -> Self {
        Skeleton { eps, delta, depth, n_in: 1, n_hid: 1, activation: Activation::Tanh, input: InputKind::Identity, output: OutputKind::Affine }
    }

    /// `sigmoid(W h_L + b)` on `h_0 = tanh(W₀x + b₀)`.
    pub fn classifier2d(eps: f64, delta: f64, depth: usize, n_hid: usize) -> Self {
        Skeleton { eps, delta, depth, n_in: 2, n_hid, activation: Activation::Tanh, input: InputKind::Tanh, output: OutputKind::Sigmoid }
    }

    pub fn for_dataset(kind: DatasetKind, eps: f64, delta: f64, depth: usize, n_hid: usize) -> Self {
        match kind {
            DatasetKind::Quad1D => Skeleton::quad1d(eps, delta, depth),
            _ => Skeleton::classifier2d(eps, delta, depth, n_hid),
        }
    }

    fn is_scalar_1d(&self) -> bool {
        self.n_in == 1 && self.n_hid == 1
    }
}

fn init_matrix(rng: &mut Rng, rows: usize, cols: usize, normal: bool) -> Mat64 {
    let data: Vec<f64> = if normal {
        (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()
    } else {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        (0..rows * cols).map(|_| rng.random_range(-a..=a)).collect()
    };
    Mat64::from_row_major(rows, cols, data).expect("sized buffer")
}

/// Initial weights: standard normal for the 1-D scalar model, Xavier uniform
/// otherwise. Biases start at zero.
pub fn xavier_init(skel: &Skeleton, seed: u64) -> Result<ResNetModel> {
    if skel.input == InputKind::Identity && skel.n_in != skel.n_hid {
        return Err(Error::InvalidConfig(format!("identity input map needs n_in = n_hid, got {} and {}", skel.n_in, skel.n_hid)));
    }
    let mut rng = rng_for(seed, 1);
    let normal = skel.is_scalar_1d();
    let n = skel.n_hid;
    let input = match skel.input {
        InputKind::Identity => AffineSigmaMap::identity(n),
        InputKind::Tanh => AffineSigmaMap::activated(init_matrix(&mut rng, n, skel.n_in, normal), Vec64::zeros(n), Activation::Tanh)?,
    };
    let layers = (0..skel.depth)
        .map(|_| {
            ResidualLayer::new(init_matrix(&mut rng, n, n, normal), Mat64::identity(n), Vec64::zeros(n), Vec64::zeros(n), skel.activation)
        })
        .collect::<Result<Vec<_>>>()?;
    let w_out = init_matrix(&mut rng, 1, n, normal);
    let output = match skel.output {
        OutputKind::Affine => AffineSigmaMap::affine(w_out, Vec64::zeros(1))?,
        OutputKind::Sigmoid => AffineSigmaMap::activated(w_out, Vec64::zeros(1), Activation::Sigmoid)?,
    };
    ResNetModel::new(skel.eps, skel.delta, input, layers, output)
}

/// Trainable entries of the flat parameter vector. Tilde blocks are frozen
/// everywhere, and so is an identity input map.
pub fn trainable_mask(model: &ResNetModel) -> Vec<bool> {
    let layout = ParamLayout::of(model);
    let mut mask = vec![false; layout.len()];
    let mut set = |lo: usize, hi: usize| mask[lo..hi].iter_mut().for_each(|m| *m = true);
    let inp = &model.input;
    let identity_input = inp.affine_only && inp.w.is_square() && inp.w.max_abs_diff(&Mat64::identity(inp.w.rows())) == 0.0;
    if !identity_input {
        set(layout.input.w, layout.input.w_tilde);
        set(layout.input.b, layout.input.b_tilde);
    }
    for o in layout.layers.iter().chain(std::iter::once(&layout.output)) {
        set(o.w, o.w_tilde);
        set(o.b, o.b_tilde);
    }
    mask
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: Loss,
    #[serde(default)]
    pub batch_norm: bool,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    /// 500 full-batch epochs at lr 0.01 on 300 points.
    pub fn quad1d(seed: u64) -> Self {
        TrainConfig { seed, lr: 0.01, batch_size: 300, epochs: 500, loss: Loss::Mse, batch_norm: false, adam: AdamConfig::default() }
    }

    /// 300 epochs with batch 128 at lr 0.01.
    pub fn classification(seed: u64, batch_norm: bool) -> Self {
        TrainConfig { seed, lr: 0.01, batch_size: 128, epochs: 300, loss: Loss::Bce, batch_norm, adam: AdamConfig::default() }
    }

    pub fn validate(&self, n_data: usize) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.batch_size > n_data {
            return Err(Error::InvalidConfig(format!("batch_size {} not in 1..={n_data}", self.batch_size)));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps_hat > 0.0) {
            return Err(Error::InvalidConfig(format!("bad adam settings {a:?}")));
        }
        Ok(())
    }
}

/// Learnable per-feature normalisation of every residual pre-activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub running_mean: Vec<Vec<f64>>,
    pub running_var: Vec<Vec<f64>>,
    pub momentum: f64,
    pub eps_floor: f64,
    pub batches_seen: u64,
}

/// Normalised features of one batch for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// `(a − μ)/√(var + e)` per sample.
    pub xhat: Vec<Vec<f64>>,
    /// `γ·x̂ + β` per sample.
    pub out: Vec<Vec<f64>>,
}

/// Batch statistics (biased variance) and the normalised output of `a`.
pub fn batch_norm_forward(a: &[Vec<f64>], gamma: &[f64], beta: &[f64], eps_floor: f64) -> BnCache {
    let m = gamma.len();
    let inv_b = 1.0 / a.len().max(1) as f64;
    let mut mean = vec![0.0; m];
    for row in a {
        for k in 0..m {
            mean[k] += row[k];
        }
    }
    mean.iter_mut().for_each(|v| *v *= inv_b);
    let mut var = vec![0.0; m];
    for row in a {
        for k in 0..m {
            var[k] += (row[k] - mean[k]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v *= inv_b);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps_floor).sqrt()).collect();
    let xhat: Vec<Vec<f64>> = a.iter().map(|row| (0..m).map(|k| (row[k] - mean[k]) * inv_std[k]).collect()).collect();
    let out = xhat.iter().map(|xr| (0..m).map(|k| gamma[k] * xr[k] + beta[k]).collect()).collect();
    BnCache { mean, var, inv_std, xhat, out }
}

impl BatchNorm {
    pub fn new(model: &ResNetModel) -> Self {
        let widths: Vec<usize> = model.layers.iter().map(|l| l.width()).collect();
        BatchNorm {
            gamma: widths.iter().map(|&m| vec![1.0; m]).collect(),
            beta: widths.iter().map(|&m| vec![0.0; m]).collect(),
            running_mean: widths.iter().map(|&m| vec![0.0; m]).collect(),
            running_var: widths.iter().map(|&m| vec![1.0; m]).collect(),
            momentum: 0.1,
            eps_floor: 1e-5,
            batches_seen: 0,
        }
    }

    pub fn n_params(&self) -> usize {
        2 * self.gamma.iter().map(Vec::len).sum::<usize>()
    }

    fn flat(&self) -> Vec<f64> {
        self.gamma.iter().chain(&self.beta).flatten().copied().collect()
    }

    fn set_flat(&mut self, p: &[f64]) {
        let mut it = p.iter();
        for v in self.gamma.iter_mut().chain(self.beta.iter_mut()).flatten() {
            *v = *it.next().expect("sized");
        }
    }

    fn record(&mut self, l: usize, c: &BnCache, batch: usize) {
        let mo = self.momentum;
        let unbias = if batch > 1 { batch as f64 / (batch - 1) as f64 } else { 1.0 };
        for k in 0..c.mean.len() {
            self.running_mean[l][k] = (1.0 - mo) * self.running_mean[l][k] + mo * c.mean[k];
            self.running_var[l][k] = (1.0 - mo) * self.running_var[l][k] + mo * c.var[k] * unbias;
        }
    }

    /// Evaluation-mode output with the frozen running statistics.
    pub fn eval(&self, model: &ResNetModel, x: &[f64]) -> Result<Vec64> {
        let mut h = model.input.eval(x);
        for (l, layer) in model.layers.iter().enumerate() {
            let a = layer.preact(&h);
            let ahat: Vec<f64> = (0..a.len())
                .map(|k| self.gamma[l][k] * (a[k] - self.running_mean[l][k]) / (self.running_var[l][k] + self.eps_floor).sqrt() + self.beta[l][k])
                .collect();
            let f = layer.eval_from_preact(&ahat);
            h = h.scaled(model.eps).add(&f.scaled(model.delta));
        }
        Ok(model.output.eval(&h))
    }
}

/// Absorbs the frozen statistics into `(W_l, b_l)`, giving a plain model.
pub fn fold(model: &ResNetModel, bn: &BatchNorm) -> Result<ResNetModel> {
    if bn.batches_seen == 0 {
        return Err(Error::InvalidState("batch norm fold before any statistics were collected".into()));
    }
    if bn.gamma.len() != model.depth() {
        return Err(Error::Dimension(format!("batch norm has {} layers, model {}", bn.gamma.len(), model.depth())));
    }
    let mut out = model.clone();
    for (l, layer) in out.layers.iter_mut().enumerate() {
        let scale: Vec<f64> = (0..layer.width()).map(|k| bn.gamma[l][k] / (bn.running_var[l][k] + bn.eps_floor).sqrt()).collect();
        layer.w = layer.w.scale_rows(&scale);
        for k in 0..layer.width() {
            layer.b[k] = scale[k] * (layer.b[k] - bn.running_mean[l][k]) + bn.beta[l][k];
        }
    }
    Ok(out)
}

/// Mean loss and gradients of one batch through the normalised network.
/// Returns `(loss, model grads, [γ…, β…] grads, per-layer caches)`.
fn bn_gradient(model: &ResNetModel, bn: &BatchNorm, batch: &[(Vec64, f64)], loss: Loss) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<BnCache>)> {
    let b = batch.len();
    let inv_b = 1.0 / b as f64;
    let layout = ParamLayout::of(model);
    let mut grad = vec![0.0; layout.len()];
    let a0: Vec<Vec64> = batch.iter().map(|(x, _)| model.input.preact(x)).collect();
    let mut states: Vec<Vec<Vec64>> = vec![a0.iter().map(|a| model.input.eval_from_preact(a)).collect()];
    let mut caches = Vec::with_capacity(model.depth());
    for (l, layer) in model.layers.iter().enumerate() {
        let prev = &states[l];
        let a: Vec<Vec<f64>> = prev.iter().map(|h| layer.preact(h).0).collect();
        let c = batch_norm_forward(&a, &bn.gamma[l], &bn.beta[l], bn.eps_floor);
        let next: Vec<Vec64> = prev
            .iter()
            .zip(&c.out)
            .map(|(h, ah)| h.scaled(model.eps).add(&layer.eval_from_preact(ah).scaled(model.delta)))
            .collect();
        caches.push(c);
        states.push(next);
    }
    let h_last = states.last().expect("h_0 present");
    let mut total = 0.0;
    let mut g_h: Vec<Vec64> = Vec::with_capacity(b);
    for (i, (_, t)) in batch.iter().enumerate() {
        let z = model.output.preact(&h_last[i]);
        let y = model.output.eval_from_preact(&z);
        let (l, g) = sample_loss(loss, y[0], z[0], *t);
        total += l;
        let g_z = back_output_stage(&model.output, &layout.output, loss, g * inv_b, &z, &mut grad);
        g_h.push(back_from_preact(&g_z, &h_last[i], &model.output.w, &mut grad, layout.output.w, layout.output.b));
    }
    let n_bn: usize = bn.gamma.iter().map(Vec::len).sum();
    let mut g_bn = vec![0.0; 2 * n_bn];
    let mut offs = Vec::with_capacity(model.depth());
    let mut acc = 0;
    for g in &bn.gamma {
        offs.push(acc);
        acc += g.len();
    }
    for (l, layer) in model.layers.iter().enumerate().rev() {
        let c = &caches[l];
        let o = &layout.layers[l];
        let m = layer.width();
        // ∂/∂â per sample, accumulating W̃, b̃ grads on the way.
        let g_ahat: Vec<Vec<f64>> = (0..b)
            .map(|i| {
                let g_f: Vec<f64> = g_h[i].iter().map(|g| model.delta * g).collect();
                let s: Vec<f64> = c.out[i].iter().map(|&y| layer.act.eval(y)).collect();
                let d: Vec<f64> = c.out[i].iter().map(|&y| layer.act.deriv(y)).collect();
                back_through_tilde(&g_f, &s, &d, &layer.w_tilde, &mut grad, o.w_tilde, o.b_tilde)
            })
            .collect();
        let mut mean_gx = vec![0.0; m];
        let mut mean_gx_x = vec![0.0; m];
        for i in 0..b {
            for k in 0..m {
                g_bn[offs[l] + k] += g_ahat[i][k] * c.xhat[i][k];
                g_bn[n_bn + offs[l] + k] += g_ahat[i][k];
                let gx = g_ahat[i][k] * bn.gamma[l][k];
                mean_gx[k] += gx * inv_b;
                mean_gx_x[k] += gx * c.xhat[i][k] * inv_b;
            }
        }
        for i in 0..b {
            let g_a: Vec<f64> = (0..m)
                .map(|k| c.inv_std[k] * (g_ahat[i][k] * bn.gamma[l][k] - mean_gx[k] - c.xhat[i][k] * mean_gx_x[k]))
                .collect();
            let mut gp = back_from_preact(&g_a, &states[l][i], &layer.w, &mut grad, o.w, o.b);
            for (gp_k, gn) in gp.iter_mut().zip(g_h[i].iter()) {
                *gp_k += model.eps * gn;
            }
            g_h[i] = gp;
        }
    }
    for (i, (x, _)) in batch.iter().enumerate() {
        back_input_stage(&model.input, &layout.input, &g_h[i], x, &a0[i], &mut grad);
    }
    let loss_value = total * inv_b;
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss_value}")));
    }
    Ok((loss_value, grad, g_bn, caches))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    /// Mean mini-batch loss per epoch.
    pub losses: Vec<f64>,
    /// Training accuracy at threshold 0.5 (classification only).
    pub accuracy: Option<f64>,
    pub wall_time_secs: f64,
    /// Fraction of trainable nonzero initial scalars whose sign flipped.
    pub sign_flip_fraction: f64,
    pub batch_norm: bool,
}

impl TrainRecord {
    /// `epoch,loss[,accuracy]`; accuracy is filled on the last row only.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.accuracy.is_some() {
            w.write_record(["epoch", "loss", "accuracy"])?;
        } else {
            w.write_record(["epoch", "loss"])?;
        }
        let last = self.losses.len();
        for (e, l) in self.losses.iter().enumerate() {
            match self.accuracy {
                Some(a) => {
                    let acc = if e + 1 == last { a.to_string() } else { String::new() };
                    w.write_record([(e + 1).to_string(), l.to_string(), acc])?;
                }
                None => w.write_record([(e + 1).to_string(), l.to_string()])?,
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Fraction of points with `(Φ(x) > 0.5) == label`.
pub fn accuracy(model: &ResNetModel, data: &Dataset) -> Result<f64> {
    let mut ok = 0usize;
    for (x, t) in data.inputs.iter().zip(&data.targets) {
        if (model.eval_scalar(x)? > 0.5) == (*t > 0.5) {
            ok += 1;
        }
    }
    Ok(ok as f64 / data.len() as f64)
}

/// Trains `model` with seeded shuffled mini-batches and Adam.
///
/// With `batch_norm` the returned model has the statistics folded in, so it is
/// a plain residual network again.
pub fn train(model: &ResNetModel, data: &Dataset, cfg: &TrainConfig) -> Result<(ResNetModel, TrainRecord)> {
    cfg.validate(data.len())?;
    if cfg.loss != data.kind.loss() {
        return Err(Error::InvalidConfig(format!("{:?} loss does not match {:?} data", cfg.loss, data.kind)));
    }
    if cfg.loss == Loss::Bce {
        check_bce_output(&model.output)?;
    }
    if model.n_in() != data.domain.dim() || model.n_out() != 1 {
        return Err(Error::Dimension(format!("model {}→{} for {}-D scalar data", model.n_in(), model.n_out(), data.domain.dim())));
    }
    let start = Instant::now();
    let mask = trainable_mask(model);
    let init = flatten_params(model);
    let mut params = init.clone();
    let mut current = model.clone();
    let mut bn = cfg.batch_norm.then(|| BatchNorm::new(model));
    let n_bn = bn.as_ref().map_or(0, BatchNorm::n_params);
    let mut bn_params = bn.as_ref().map_or(Vec::new(), BatchNorm::flat);
    let mut adam = AdamState::new(params.len() + n_bn);
    let mut rng = rng_for(derive_seed(cfg.seed, 0x7472_6169_6e), 0);
    let pairs = data.pairs();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let np = params.len();
    let mut joint = vec![0.0; np + n_bn];
    let mut joint_grad = vec![0.0; params.len() + n_bn];

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(Vec64, f64)> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let ctx = |e: Error| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {} batch {}: {m}", epoch + 1, bi + 1)),
                other => other,
            };
            let (loss, grad, g_bn) = match bn.as_mut() {
                None => {
                    let pg = param_gradient(&current, &batch, cfg.loss).map_err(ctx)?;
                    (pg.loss, pg.grad, Vec::new())
                }
                Some(state) => {
                    let (l, g, gb, caches) = bn_gradient(&current, state, &batch, cfg.loss).map_err(ctx)?;
                    for (li, c) in caches.iter().enumerate() {
                        state.record(li, c, batch.len());
                    }
                    state.batches_seen += 1;
                    (l, g, gb)
                }
            };
            epoch_total += loss * batch.len() as f64;
            for (i, g) in grad.iter().enumerate() {
                joint_grad[i] = if mask[i] { *g } else { 0.0 };
            }
            joint_grad[np..].copy_from_slice(&g_bn);
            joint[..np].copy_from_slice(&params);
            joint[np..].copy_from_slice(&bn_params);
            adam_step(&mut adam, &mut joint, &joint_grad, cfg.lr, &cfg.adam)?;
            params.copy_from_slice(&joint[..np]);
            bn_params.copy_from_slice(&joint[np..]);
            if let Some(state) = bn.as_mut() {
                state.set_flat(&bn_params);
            }
            unflatten_params(&mut current, &params).map_err(ctx)?;
        }
        let mean = epoch_total / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("epoch {} loss is {mean}", epoch + 1)));
        }
        losses.push(mean);
    }

    let trained = match &bn {
        Some(state) if state.batches_seen > 0 => fold(&current, state)?,
        _ => current,
    };
    let candidates: Vec<usize> = (0..init.len()).filter(|&i| mask[i] && init[i] != 0.0).collect();
    let final_params = flatten_params(&trained);
    let flips = candidates.iter().filter(|&&i| final_params[i].signum() != init[i].signum()).count();
    let accuracy = if data.kind.is_classification() { Some(accuracy(&trained, data)?) } else { None };
    let record = TrainRecord {
        losses,
        accuracy,
        wall_time_secs: start.elapsed().as_secs_f64(),
        sign_flip_fraction: if candidates.is_empty() { 0.0 } else { flips as f64 / candidates.len() as f64 },
        batch_norm: cfg.batch_norm,
    };
    Ok((trained, record))
}

/// Initialises and trains one model per seed; seeds run in parallel.
pub fn train_seeds(skel: &Skeleton, data: &Dataset, base: &TrainConfig, seeds: &[u64]) -> Vec<Result<(ResNetModel, TrainRecord)>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let model = xavier_init(skel, seed)?;
            let cfg = TrainConfig { seed, ..base.clone() };
            train(&model, data, &cfg)
        })
        .collect()
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    data.write_csv(std::fs::File::create(path)?)
}
