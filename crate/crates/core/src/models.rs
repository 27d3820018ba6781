//! Skip/residual-scaled ResNets, their MLP limit, and neural ODE counterparts.
//!
//! A model evaluates `Φ(x) = λ̃(h_L(λ(x)))` where every hidden update is
//! `h_l = ε·h_{l−1} + δ·f_l(h_{l−1})` with the canonical residual branch
//! `f_l(h) = W̃_l σ(W_l h + b_l) + b̃_l`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Mat64, Vec64};

/// Component-wise activation. ReLU-type functions are deliberately absent:
/// the theory needs a smooth, strictly increasing, globally Lipschitz σ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn eval(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => y.tanh(),
            Activation::Sigmoid => {
                if y >= 0.0 {
                    1.0 / (1.0 + (-y).exp())
                } else {
                    let e = y.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    /// σ′(y), written so it stays strictly positive far into the tails
    /// (1 − tanh² rounds to exactly 0 once |y| ≳ 19).
    #[inline]
    pub fn deriv(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let e = (-2.0 * y.abs()).exp();
                4.0 * e / ((1.0 + e) * (1.0 + e))
            }
            Activation::Sigmoid => {
                let e = (-y.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
        }
    }

    /// σ″(y), used only by the batch-norm-free second-order checks in tests.
    #[inline]
    pub fn deriv2(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * y.tanh() * self.deriv(y),
            Activation::Sigmoid => {
                let s = self.eval(y);
                self.deriv(y) * (1.0 - 2.0 * s)
            }
        }
    }

    /// Global bound `S_σ ≥ sup |σ|`.
    pub fn s_sigma(self) -> f64 {
        1.0
    }

    /// Global Lipschitz constant `K_σ = sup σ′`.
    pub fn k_sigma(self) -> f64 {
        match self {
            Activation::Tanh => 1.0,
            Activation::Sigmoid => 0.25,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::InvalidArgument(format!("unknown activation '{other}' (tanh|sigmoid)"))),
        }
    }
}

/// One canonical residual branch `f(h) = W̃ σ(W h + b) + b̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualLayer {
    /// `m × n_hid`
    pub w: Mat64,
    /// `n_hid × m`
    pub w_tilde: Mat64,
    pub b: Vec64,
    pub b_tilde: Vec64,
    pub act: Activation,
}

impl ResidualLayer {
    pub fn new(w: Mat64, w_tilde: Mat64, b: Vec64, b_tilde: Vec64, act: Activation) -> Result<Self> {
        let (m, n) = w.shape();
        if w_tilde.shape() != (n, m) || b.len() != m || b_tilde.len() != n {
            return Err(Error::Dimension(format!(
                "residual layer: W {:?}, W̃ {:?}, b {}, b̃ {} do not chain n→m→n",
                w.shape(),
                w_tilde.shape(),
                b.len(),
                b_tilde.len()
            )));
        }
        Ok(ResidualLayer { w, w_tilde, b, b_tilde, act })
    }

    /// Inner width `m_l`.
    pub fn width(&self) -> usize {
        self.w.rows()
    }

    pub fn n_hid(&self) -> usize {
        self.w.cols()
    }

    /// Pre-activation `a = W h + b`.
    pub fn preact(&self, h: &[f64]) -> Vec64 {
        let mut a = self.w.matvec(h);
        a.axpy(1.0, &self.b);
        a
    }

    /// `f(h)` given its pre-activation.
    pub fn eval_from_preact(&self, a: &[f64]) -> Vec64 {
        let s: Vec<f64> = a.iter().map(|&y| self.act.eval(y)).collect();
        let mut out = self.w_tilde.matvec(&s);
        out.axpy(1.0, &self.b_tilde);
        out
    }

    pub fn eval(&self, h: &[f64]) -> Vec64 {
        self.eval_from_preact(&self.preact(h))
    }

    /// `∂f = W̃ diag(σ′(a)) W` at pre-activation `a`.
    pub fn jacobian_from_preact(&self, a: &[f64]) -> Mat64 {
        let d: Vec<f64> = a.iter().map(|&y| self.act.deriv(y)).collect();
        self.w_tilde.scale_cols(&d).matmul(&self.w)
    }

    pub fn same_shape(&self, other: &ResidualLayer) -> bool {
        self.w.shape() == other.w.shape() && self.act == other.act
    }
}

/// Input or output transform `x ↦ W̃ σ(W x + b) + b̃`; with `affine_only`
/// the activation is skipped and the map is `W̃ (W x + b) + b̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineSigmaMap {
    pub w: Mat64,
    pub w_tilde: Mat64,
    pub b: Vec64,
    pub b_tilde: Vec64,
    pub act: Activation,
    pub affine_only: bool,
}

impl AffineSigmaMap {
    pub fn new(
        w: Mat64,
        w_tilde: Mat64,
        b: Vec64,
        b_tilde: Vec64,
        act: Activation,
        affine_only: bool,
    ) -> Result<Self> {
        let (m, _) = w.shape();
        if w_tilde.cols() != m || b.len() != m || b_tilde.len() != w_tilde.rows() {
            return Err(Error::Dimension(format!(
                "transform: W {:?}, W̃ {:?}, b {}, b̃ {} are inconsistent",
                w.shape(),
                w_tilde.shape(),
                b.len(),
                b_tilde.len()
            )));
        }
        Ok(AffineSigmaMap { w, w_tilde, b, b_tilde, act, affine_only })
    }

    pub fn identity(n: usize) -> Self {
        AffineSigmaMap {
            w: Mat64::identity(n),
            w_tilde: Mat64::identity(n),
            b: Vec64::zeros(n),
            b_tilde: Vec64::zeros(n),
            act: Activation::Tanh,
            affine_only: true,
        }
    }

    /// `x ↦ W x + b` (the tilde part is the identity).
    pub fn affine(w: Mat64, b: Vec64) -> Result<Self> {
        let m = w.rows();
        AffineSigmaMap::new(w, Mat64::identity(m), b, Vec64::zeros(m), Activation::Tanh, true)
    }

    /// `x ↦ σ(W x + b)` (the tilde part is the identity).
    pub fn activated(w: Mat64, b: Vec64, act: Activation) -> Result<Self> {
        let m = w.rows();
        AffineSigmaMap::new(w, Mat64::identity(m), b, Vec64::zeros(m), act, false)
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w_tilde.rows()
    }

    pub fn width(&self) -> usize {
        self.w.rows()
    }

    pub fn preact(&self, x: &[f64]) -> Vec64 {
        let mut a = self.w.matvec(x);
        a.axpy(1.0, &self.b);
        a
    }

    pub fn eval_from_preact(&self, a: &[f64]) -> Vec64 {
        let mut out = if self.affine_only {
            self.w_tilde.matvec(a)
        } else {
            let s: Vec<f64> = a.iter().map(|&y| self.act.eval(y)).collect();
            self.w_tilde.matvec(&s)
        };
        out.axpy(1.0, &self.b_tilde);
        out
    }

    pub fn eval(&self, x: &[f64]) -> Vec64 {
        self.eval_from_preact(&self.preact(x))
    }

    /// Derivative of the activation stage at `a` (all ones when affine).
    pub fn act_deriv(&self, a: &[f64]) -> Vec<f64> {
        if self.affine_only {
            vec![1.0; a.len()]
        } else {
            a.iter().map(|&y| self.act.deriv(y)).collect()
        }
    }

    /// Jacobian `W̃ diag(σ′(W x + b)) W` at `x`.
    pub fn jacobian(&self, x: &[f64]) -> Mat64 {
        let a = self.preact(x);
        self.w_tilde.scale_cols(&self.act_deriv(&a)).matmul(&self.w)
    }

    /// Upper bound on the Lipschitz constant in the max-norm.
    pub fn lipschitz_bound(&self) -> f64 {
        let k = if self.affine_only { 1.0 } else { self.act.k_sigma() };
        self.w_tilde.norm_inf() * k * self.w.norm_inf()
    }
}

/// Hidden states `h_0 … h_L` and residual pre-activations `a_1 … a_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    pub states: Vec<Vec64>,
    pub preacts: Vec<Vec64>,
    /// Pre-activation of λ at the input.
    pub input_preact: Vec64,
    /// Pre-activation of λ̃ at `h_L`.
    pub output_preact: Vec64,
}

/// `Φ(x) = λ̃(h_L(λ(x)))` with `h_l = ε h_{l−1} + δ f_l(h_{l−1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResNetModel {
    pub eps: f64,
    pub delta: f64,
    pub input: AffineSigmaMap,
    pub layers: Vec<ResidualLayer>,
    pub output: AffineSigmaMap,
}

impl ResNetModel {
    pub fn new(
        eps: f64,
        delta: f64,
        input: AffineSigmaMap,
        layers: Vec<ResidualLayer>,
        output: AffineSigmaMap,
    ) -> Result<Self> {
        if !(eps.is_finite() && eps >= 0.0 && delta.is_finite() && delta >= 0.0) {
            return Err(Error::InvalidArgument(format!("need finite ε, δ ≥ 0, got ε={eps}, δ={delta}")));
        }
        let n_hid = input.out_dim();
        for (i, l) in layers.iter().enumerate() {
            if l.n_hid() != n_hid {
                return Err(Error::Dimension(format!(
                    "layer {} acts on width {}, but λ maps into {n_hid}",
                    i + 1,
                    l.n_hid()
                )));
            }
        }
        if output.in_dim() != n_hid {
            return Err(Error::Dimension(format!("λ̃ expects {} inputs, hidden width is {n_hid}", output.in_dim())));
        }
        Ok(ResNetModel { eps, delta, input, layers, output })
    }

    pub fn n_in(&self) -> usize {
        self.input.in_dim()
    }

    pub fn n_hid(&self) -> usize {
        self.input.out_dim()
    }

    pub fn n_out(&self) -> usize {
        self.output.out_dim()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `α = δ/ε`, undefined for `ε = 0`.
    pub fn alpha(&self) -> Option<f64> {
        (self.eps > 0.0).then(|| self.delta / self.eps)
    }

    /// Hidden width does not exceed input width.
    pub fn is_non_augmented(&self) -> bool {
        self.n_in() >= self.n_hid()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_in() {
            return Err(Error::Dimension(format!("input has {} entries, model expects {}", x.len(), self.n_in())));
        }
        Ok(())
    }

    /// Evaluates the model and returns the trace used by the gradient code.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec64, HiddenTrace)> {
        self.check_input(x)?;
        let input_preact = self.input.preact(x);
        let mut h = self.input.eval_from_preact(&input_preact);
        h.check_finite("λ(x)")?;
        let mut states = Vec::with_capacity(self.depth() + 1);
        let mut preacts = Vec::with_capacity(self.depth());
        for (i, layer) in self.layers.iter().enumerate() {
            let a = layer.preact(&h);
            let f = layer.eval_from_preact(&a);
            let mut next = h.scaled(self.eps);
            next.axpy(self.delta, &f);
            next.check_finite(&format!("hidden state h_{}", i + 1))?;
            states.push(std::mem::replace(&mut h, next));
            preacts.push(a);
        }
        let output_preact = self.output.preact(&h);
        let y = self.output.eval_from_preact(&output_preact);
        y.check_finite("output λ̃(h_L)")?;
        states.push(h);
        Ok((y, HiddenTrace { states, preacts, input_preact, output_preact }))
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec64> {
        Ok(self.forward(x)?.0)
    }

    /// Scalar output; panics on non-scalar models, errors on bad input or non-finite values.
    pub fn eval_scalar(&self, x: &[f64]) -> Result<f64> {
        assert_eq!(self.n_out(), 1, "eval_scalar on a model with {} outputs", self.n_out());
        Ok(self.eval(x)?[0])
    }

    /// Evaluates through the closed-form expansion
    /// `h_l = ε^l λ(x) + δ Σ_{j≤l} ε^{l−j} f_j(h_{j−1})`.
    ///
    /// The residual terms still need the iterated states as arguments, but the
    /// output is assembled from the weighted sum rather than the recursion.
    pub fn forward_unrolled(&self, x: &[f64]) -> Result<Vec64> {
        self.check_input(x)?;
        let h0 = self.input.eval(x);
        h0.check_finite("λ(x)")?;
        let mut fs: Vec<Vec64> = Vec::with_capacity(self.depth());
        let mut h = h0.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            fs.push(layer.eval(&h));
            // Rebuild h_{l+1} from the sum so that every state comes from the expansion.
            let big_l = l + 1;
            let mut acc = h0.scaled(self.eps.powi(big_l as i32));
            for (j, f) in fs.iter().enumerate() {
                acc.axpy(self.delta * self.eps.powi((big_l - (j + 1)) as i32), f);
            }
            acc.check_finite(&format!("unrolled state h_{big_l}"))?;
            h = acc;
        }
        let y = self.output.eval(&h);
        y.check_finite("output λ̃(h_L)")?;
        Ok(y)
    }

    /// The same architecture with the shortcut removed (`ε = 0`).
    pub fn to_mlp(&self) -> ResNetModel {
        let mut m = self.clone();
        m.eps = 0.0;
        m
    }
}

/// `resnet_to_mlp`: the `ε = 0` copy, whose map is a plain feed-forward network.
pub fn resnet_to_mlp(model: &ResNetModel) -> ResNetModel {
    model.to_mlp()
}

/// Fixed-step integrators for [`integrate_node`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OdeMethod {
    Euler,
    Rk4,
}

/// `dh/dt = c·h + f(h, θ(t))` on `[0, T]`, started at `λ(x)` and read out through `λ̃`.
///
/// `θ(t)` is piecewise constant: segment `i` is active on `[knots[i], knots[i+1])`,
/// the last one through `T`. An autonomous field has one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralOdeSpec {
    pub segments: Vec<ResidualLayer>,
    pub knots: Vec<f64>,
    pub linear_coeff: f64,
    pub horizon_t: f64,
    pub input: AffineSigmaMap,
    pub output: AffineSigmaMap,
}

impl NeuralOdeSpec {
    pub fn autonomous(field: ResidualLayer, horizon_t: f64, input: AffineSigmaMap, output: AffineSigmaMap) -> Result<Self> {
        NeuralOdeSpec::new(vec![field], vec![0.0], 0.0, horizon_t, input, output)
    }

    pub fn new(
        segments: Vec<ResidualLayer>,
        knots: Vec<f64>,
        linear_coeff: f64,
        horizon_t: f64,
        input: AffineSigmaMap,
        output: AffineSigmaMap,
    ) -> Result<Self> {
        if !(horizon_t.is_finite() && horizon_t > 0.0) {
            return Err(Error::InvalidArgument(format!("horizon T must be positive, got {horizon_t}")));
        }
        if segments.is_empty() || segments.len() != knots.len() || knots[0] != 0.0 {
            return Err(Error::InvalidArgument("need one knot per segment, starting at t = 0".into()));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) || knots.iter().any(|&k| k >= horizon_t) {
            return Err(Error::InvalidArgument("knots must increase strictly inside [0, T)".into()));
        }
        let n = input.out_dim();
        if segments.iter().any(|s| s.n_hid() != n || !s.same_shape(&segments[0])) || output.in_dim() != n {
            return Err(Error::Dimension("field segments and transforms must share the hidden width".into()));
        }
        Ok(NeuralOdeSpec { segments, knots, linear_coeff, horizon_t, input, output })
    }

    pub fn n_hid(&self) -> usize {
        self.input.out_dim()
    }

    /// Parameters active at time `t`.
    pub fn params_at(&self, t: f64) -> &ResidualLayer {
        // Knots are produced as (l−1)·δ; the slack absorbs rounding in t.
        let slack = 1e-12 * self.horizon_t.max(1.0);
        let idx = self.knots.partition_point(|&k| k <= t + slack);
        &self.segments[idx.saturating_sub(1)]
    }

    pub fn field(&self, h: &[f64], t: f64) -> Vec64 {
        let mut f = self.params_at(t).eval(h);
        if self.linear_coeff != 0.0 {
            for (fi, hi) in f.iter_mut().zip(h) {
                *fi += self.linear_coeff * hi;
            }
        }
        f
    }
}

/// Integrates the IVP with a fixed step `T/steps` and returns `λ̃(h(T))`.
pub fn integrate_node(spec: &NeuralOdeSpec, x: &[f64], steps: usize, method: OdeMethod) -> Result<Vec64> {
    if steps == 0 {
        return Err(Error::InvalidArgument("integrate_node needs at least one step".into()));
    }
    if x.len() != spec.input.in_dim() {
        return Err(Error::Dimension(format!("input has {} entries, spec expects {}", x.len(), spec.input.in_dim())));
    }
    let dt = spec.horizon_t / steps as f64;
    let mut h = spec.input.eval(x);
    for k in 0..steps {
        let t = k as f64 * dt;
        match method {
            OdeMethod::Euler => {
                let f = spec.field(&h, t);
                h.axpy(dt, &f);
            }
            OdeMethod::Rk4 => {
                let k1 = spec.field(&h, t);
                let mut tmp = h.clone();
                tmp.axpy(0.5 * dt, &k1);
                let k2 = spec.field(&tmp, t + 0.5 * dt);
                let mut tmp = h.clone();
                tmp.axpy(0.5 * dt, &k2);
                let k3 = spec.field(&tmp, t + 0.5 * dt);
                let mut tmp = h.clone();
                tmp.axpy(dt, &k3);
                let k4 = spec.field(&tmp, t + dt);
                for i in 0..h.len() {
                    h[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        if !h.is_finite() {
            return Err(Error::NonFinite(format!("ODE state at t = {:.6}", t + dt)));
        }
    }
    let y = spec.output.eval(&h);
    y.check_finite("ODE readout")?;
    Ok(y)
}

/// Explicit Euler with `L` steps of size `δ = T/L`, written as a ResNet.
///
/// Layer `l` uses the parameters active at `t_{l−1} = (l−1)δ`. A linear term
/// `c·h` in the field folds into the shortcut as `ε = 1 + δc`.
pub fn euler_discretize(spec: &NeuralOdeSpec, big_l: usize) -> Result<ResNetModel> {
    if big_l == 0 {
        return Err(Error::InvalidArgument("euler_discretize needs L ≥ 1".into()));
    }
    let delta = spec.horizon_t / big_l as f64;
    let eps = 1.0 + delta * spec.linear_coeff;
    let layers = (0..big_l).map(|l| spec.params_at(l as f64 * delta).clone()).collect();
    ResNetModel::new(eps, delta, spec.input.clone(), layers, spec.output.clone())
}

/// Neural ODE on `[0, Lδ]` whose `L`-step Euler scheme reproduces `model`.
///
/// The field is `((ε−1)/δ)·h + f_RN(h, θ(t))` with layer `l` active on
/// `[(l−1)δ, lδ)`.
pub fn embed_resnet_as_node(model: &ResNetModel) -> Result<NeuralOdeSpec> {
    if model.delta <= 0.0 {
        return Err(Error::InvalidArgument("embedding needs δ > 0".into()));
    }
    if model.layers.is_empty() {
        return Err(Error::InvalidArgument("embedding needs at least one layer".into()));
    }
    if model.layers.iter().any(|l| !l.same_shape(&model.layers[0])) {
        return Err(Error::InvalidArgument("embedding needs equal-shape layers".into()));
    }
    let big_l = model.depth();
    let knots = (0..big_l).map(|l| l as f64 * model.delta).collect();
    NeuralOdeSpec::new(
        model.layers.clone(),
        knots,
        (model.eps - 1.0) / model.delta,
        big_l as f64 * model.delta,
        model.input.clone(),
        model.output.clone(),
    )
}
