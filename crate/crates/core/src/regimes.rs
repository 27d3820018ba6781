//! When can `Φ` have critical points?
//!
//! A layer Jacobian `D_l = ε·I + δ·∂f_l` is singular exactly when `−1/α` is an
//! eigenvalue of `∂f_l`. For canonical layers the eigenvalues of
//! `∂f_l = W̃_l σ′(a_l) W_l` are controlled by the singular values of
//! `W_l W̃_l` and the range of `σ′`, which gives two sufficient conditions:
//!
//! - `α < 1/(ν_max K_σ)`: every eigenvalue is smaller than `1/α` in modulus,
//! - `α > 1/(ν_min k_σ)`: every eigenvalue is larger than `1/α` in modulus.
//!
//! Either one rules out critical points of a non-augmented model whose
//! transforms have full-rank Jacobians.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::layer_jacobians;
use crate::models::{Activation, AffineSigmaMap, ResNetModel, ResidualLayer};
use crate::numerics::{singular_values, solve_det_shift, spectral_summary, BoxDomain, Mat64, Vec64};

/// Relative determinant level below which `−1/α` counts as an eigenvalue.
pub const EIGEN_HIT_TOL: f64 = 1e-10;
/// Relative singular-value level for the full-rank checks on λ and λ̃.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeConstants {
    #[serde(rename = "K_sigma")]
    pub k_sigma_upper: f64,
    #[serde(rename = "S_sigma")]
    pub s_sigma: f64,
    /// Certified lower bound of σ′ over all reachable pre-activations.
    pub k_sigma: f64,
    /// Smallest σ′ seen on a sample grid (diagnostic only).
    pub k_sigma_empirical: Option<f64>,
    pub nu_max: f64,
    pub nu_min: f64,
    pub omega_inf: f64,
    pub omega_tilde_inf: f64,
    pub beta_tilde_inf: f64,
    /// `δ/ε`; infinite for `ε = 0`.
    pub alpha: f64,
    /// Sup-norm bound of λ on the domain.
    pub s_lambda: f64,
    /// Per-layer bounds on `‖a_l‖_∞`.
    pub preact_bounds: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    NoCriticalPointsNodeSide,
    NoCriticalPointsMlpSide,
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub constants: RegimeConstants,
    pub node_side_excluded: bool,
    pub mlp_side_excluded: bool,
    pub verdict: Verdict,
    /// `(1/(ν_max K_σ), 1/(ν_min k_σ))`, infinite when a denominator vanishes.
    pub thresholds: (f64, f64),
    /// Residual branches contribute nothing to the Jacobian (`ν_max = 0`).
    pub degenerate: bool,
    /// Every layer satisfies `m_l ≤ n_hid`, needed for the MLP-side test.
    pub mlp_precondition: bool,
    /// Set when `ε = 0` or `δ = 0` routed the verdict to an exact limit.
    pub limit: Option<String>,
    pub notes: Vec<String>,
}

/// Interval bound of `‖map(x)‖_∞` over the box.
pub fn map_sup_norm(map: &AffineSigmaMap, domain: &BoxDomain) -> f64 {
    let (c, r) = (domain.center(), domain.radius());
    let (lo, hi) = affine_interval(&map.w, &map.b, &c, &r);
    let (slo, shi): (Vec<f64>, Vec<f64>) = if map.affine_only {
        (lo, hi)
    } else {
        (lo.iter().map(|&v| map.act.eval(v)).collect(), hi.iter().map(|&v| map.act.eval(v)).collect())
    };
    let sc: Vec<f64> = slo.iter().zip(&shi).map(|(a, b)| 0.5 * (a + b)).collect();
    let sr: Vec<f64> = slo.iter().zip(&shi).map(|(a, b)| 0.5 * (b - a)).collect();
    let (ylo, yhi) = affine_interval(&map.w_tilde, &map.b_tilde, &sc, &sr);
    ylo.iter().zip(&yhi).fold(0.0, |m, (a, b)| m.max(a.abs()).max(b.abs()))
}

/// Componentwise range of `W x + b` for `x ∈ [c − r, c + r]`.
fn affine_interval(w: &Mat64, b: &[f64], c: &[f64], r: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mid = w.matvec(c);
    let mut lo = Vec::with_capacity(w.rows());
    let mut hi = Vec::with_capacity(w.rows());
    for i in 0..w.rows() {
        let rad: f64 = w.row(i).iter().zip(r).map(|(a, ri)| a.abs() * ri).sum();
        lo.push(mid[i] + b[i] - rad);
        hi.push(mid[i] + b[i] + rad);
    }
    (lo, hi)
}

fn layer_sup(layer: &ResidualLayer) -> f64 {
    layer.w_tilde.norm_inf() * layer.act.s_sigma() + layer.b_tilde.norm_inf()
}

/// Regime constants of a canonical model over `domain`.
///
/// Pre-activation bounds (which fix `k_σ`) use
/// `H = S_λ + δ·S_f/(1 − ε)` when `ε < 1`, and the layer recursion
/// `H_l = ε·H_{l−1} + δ·(‖W̃_l‖ S_σ + ‖b̃_l‖)` otherwise, with `A_l = ‖W_l‖ H_{l−1} + ‖b_l‖`.
pub fn compute_constants(model: &ResNetModel, domain: &BoxDomain) -> Result<RegimeConstants> {
    if domain.dim() != model.n_in() {
        return Err(Error::Dimension(format!("domain is {}-D, model input is {}-D", domain.dim(), model.n_in())));
    }
    let mut nu_max = 0.0_f64;
    let mut nu_min = f64::INFINITY;
    let mut omega = 0.0_f64;
    let mut omega_t = 0.0_f64;
    let mut beta_t = 0.0_f64;
    let mut k_upper = 0.0_f64;
    let mut s_sigma = 0.0_f64;
    for layer in &model.layers {
        let prod = layer.w.matmul(&layer.w_tilde);
        let sv = singular_values(&prod)?;
        nu_max = nu_max.max(sv.first().copied().unwrap_or(0.0));
        // m_l > n_hid makes W W̃ rank deficient; its smallest singular value is then 0.
        let smallest = if layer.width() > layer.n_hid() { 0.0 } else { sv.last().copied().unwrap_or(0.0) };
        nu_min = nu_min.min(smallest);
        omega = omega.max(layer.w.norm_inf());
        omega_t = omega_t.max(layer.w_tilde.norm_inf());
        beta_t = beta_t.max(layer.b_tilde.norm_inf());
        k_upper = k_upper.max(layer.act.k_sigma());
        s_sigma = s_sigma.max(layer.act.s_sigma());
    }
    if model.layers.is_empty() {
        nu_min = 0.0;
        let act = model.input.act;
        k_upper = act.k_sigma();
        s_sigma = act.s_sigma();
    }

    let s_lambda = map_sup_norm(&model.input, domain);
    let (eps, delta) = (model.eps, model.delta);
    let mut preact_bounds = Vec::with_capacity(model.depth());
    if eps < 1.0 {
        let s_f = model.layers.iter().map(layer_sup).fold(0.0, f64::max);
        let h = s_lambda + delta * s_f / (1.0 - eps);
        for layer in &model.layers {
            preact_bounds.push(layer.w.norm_inf() * h + layer.b.norm_inf());
        }
    } else {
        let mut h = s_lambda;
        for layer in &model.layers {
            preact_bounds.push(layer.w.norm_inf() * h + layer.b.norm_inf());
            h = eps * h + delta * layer_sup(layer);
        }
    }
    let k_sigma = model
        .layers
        .iter()
        .zip(&preact_bounds)
        .map(|(l, &a)| l.act.deriv(a))
        .fold(k_upper, f64::min);
    let alpha = if eps > 0.0 { delta / eps } else { f64::INFINITY };
    Ok(RegimeConstants {
        k_sigma_upper: k_upper,
        s_sigma,
        k_sigma,
        k_sigma_empirical: None,
        nu_max,
        nu_min,
        omega_inf: omega,
        omega_tilde_inf: omega_t,
        beta_tilde_inf: beta_t,
        alpha,
        s_lambda,
        preact_bounds,
    })
}

/// Smallest `σ′(a_l)` over a lattice of the domain (diagnostic, never used to certify).
pub fn empirical_k_sigma(model: &ResNetModel, domain: &BoxDomain, per_axis: usize) -> Result<f64> {
    let mut best = f64::INFINITY;
    for x in sample_lattice(domain, per_axis) {
        let (_, trace) = model.forward(&x)?;
        for (layer, a) in model.layers.iter().zip(&trace.preacts) {
            for &y in a.iter() {
                best = best.min(layer.act.deriv(y));
            }
        }
    }
    Ok(best)
}

/// Uniform lattice including corners; capped near 4096 points in higher dimensions.
pub fn sample_lattice(domain: &BoxDomain, per_axis: usize) -> Vec<Vec<f64>> {
    let n = domain.dim();
    let mut k = per_axis.max(2);
    while n > 1 && k > 2 && k.pow(n as u32) > 4096 {
        k -= 1;
    }
    let total = k.pow(n as u32);
    (0..total)
        .map(|mut idx| {
            (0..n)
                .map(|d| {
                    let i = idx % k;
                    idx /= k;
                    domain.lo[d] + (domain.hi[d] - domain.lo[d]) * i as f64 / (k - 1) as f64
                })
                .collect()
        })
        .collect()
}

fn check_assumption_c(model: &ResNetModel, domain: &BoxDomain) -> Result<()> {
    for x in sample_lattice(domain, 5) {
        let j = model.input.jacobian(&x);
        let sv = singular_values(&j)?;
        let (smax, smin) = (sv[0], *sv.last().unwrap());
        if !(smin > RANK_TOL * smax.max(1e-300)) || sv.len() < model.n_hid() {
            return Err(Error::Inapplicable(format!("λ Jacobian is rank deficient at {x:?} (σ_min = {smin:e})")));
        }
        let (_, trace) = model.forward(&x)?;
        let jo = model.output.jacobian(trace.states.last().unwrap());
        for r in 0..jo.rows() {
            if jo.row(r).iter().all(|v| v.abs() <= 1e-300) {
                return Err(Error::Inapplicable(format!("λ̃ Jacobian row {r} vanishes at {x:?}")));
            }
        }
    }
    Ok(())
}

/// Exact `ε = 0` route: an MLP with square, invertible layer factors has
/// invertible layer Jacobians everywhere.
fn mlp_limit_ok(model: &ResNetModel) -> Result<bool> {
    if model.delta <= 0.0 {
        return Ok(false);
    }
    for layer in &model.layers {
        if layer.width() != layer.n_hid() {
            return Ok(false);
        }
        for m in [&layer.w, &layer.w_tilde] {
            let s = spectral_summary(m)?;
            if !(s.sigma_min > RANK_TOL * s.sigma_max) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Certified "no critical points" verdict for a non-augmented scalar model.
pub fn classify_regime(model: &ResNetModel, domain: &BoxDomain) -> Result<RegimeReport> {
    if !model.is_non_augmented() {
        return Err(Error::Inapplicable(format!(
            "augmented model (n_in = {} < n_hid = {}): layer rank does not exclude critical points",
            model.n_in(),
            model.n_hid()
        )));
    }
    let constants = compute_constants(model, domain)?;
    check_assumption_c(model, domain)?;
    let mut notes = Vec::new();
    let mlp_precondition = model.layers.iter().all(|l| l.width() <= l.n_hid());
    if !mlp_precondition {
        notes.push("some layer has m_l > n_hid; MLP-side test disabled".into());
    }
    let lo = 1.0 / (constants.nu_max * constants.k_sigma_upper);
    let hi = 1.0 / (constants.nu_min * constants.k_sigma);
    let lo = if lo.is_finite() { lo } else { f64::INFINITY };
    let hi = if hi.is_finite() { hi } else { f64::INFINITY };
    let degenerate = constants.nu_max == 0.0;
    if degenerate {
        notes.push("ν_max = 0: residual branches have zero Jacobian".into());
    }

    let (eps, delta) = (model.eps, model.delta);
    let (node, mlp, limit) = if eps == 0.0 && delta == 0.0 {
        notes.push("ε = δ = 0: Φ is constant".into());
        (false, false, Some("constant".to_string()))
    } else if delta == 0.0 {
        (true, false, Some("skip-only".to_string()))
    } else if eps == 0.0 {
        let ok = mlp_limit_ok(model)?;
        if !ok {
            notes.push("ε = 0 but some layer factor is non-square or singular".into());
        }
        (false, ok, Some("mlp".to_string()))
    } else {
        let alpha = constants.alpha;
        (alpha < lo, mlp_precondition && alpha > hi, None)
    };
    if node && mlp {
        notes.push("both sides report exclusion; estimates crossed".into());
    }
    let verdict = if node {
        Verdict::NoCriticalPointsNodeSide
    } else if mlp {
        Verdict::NoCriticalPointsMlpSide
    } else {
        Verdict::Indeterminate
    };
    Ok(RegimeReport {
        constants,
        node_side_excluded: node,
        mlp_side_excluded: mlp,
        verdict,
        thresholds: (lo, hi),
        degenerate,
        mlp_precondition,
        limit,
        notes,
    })
}

/// Rank status of one layer Jacobian at one input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankCheck {
    pub full_rank: bool,
    /// `|det(∂f + I/α)|`.
    pub abs_det: f64,
    /// `σ_min(D_l)`.
    pub sigma_min_d: f64,
}

/// For each input and each layer, whether `−1/α` avoids the spectrum of `∂f_l`.
pub fn pointwise_full_rank_check(model: &ResNetModel, xs: &[Vec<f64>]) -> Result<Vec<Vec<RankCheck>>> {
    if !(model.eps > 0.0 && model.delta > 0.0) {
        return Err(Error::InvalidArgument("pointwise rank check needs ε, δ > 0".into()));
    }
    let inv_alpha = model.eps / model.delta;
    xs.iter()
        .map(|x| {
            layer_jacobians(model, x)?
                .into_iter()
                .map(|lj| {
                    let n = lj.raw_df.rows() as i32;
                    let abs_det = solve_det_shift(&lj.raw_df, inv_alpha)?;
                    // Scale by the size of the two addends; σ_max of the sum itself
                    // collapses to 0 exactly where the test matters in 1-D.
                    let scale = spectral_summary(&lj.raw_df)?.sigma_max + inv_alpha;
                    let sigma_min_d = spectral_summary(&lj.d)?.sigma_min;
                    Ok(RankCheck { full_rank: abs_det > EIGEN_HIT_TOL * scale.powi(n), abs_det, sigma_min_d })
                })
                .collect()
        })
        .collect()
}

/// `(tanh′)^{−1}(v) = arccosh(v^{−1/2})` on `(0, 1]`, the non-negative branch.
pub fn invdtanh(v: f64) -> Result<f64> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::NoSolution(format!("tanh′ never equals {v}")));
    }
    Ok((1.0 / v.sqrt()).acosh())
}

/// Scalar tanh layer parameters that make `x = target_x` critical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalConstruction {
    /// 1-based index of the new layer.
    pub layer_index: usize,
    #[serde(rename = "W")]
    pub w: f64,
    pub b_plus: f64,
    pub b_minus: f64,
    pub target_x: f64,
    pub alpha: f64,
    /// `h_{l−1}(target_x)` produced by the prefix.
    pub h_prev: f64,
}

impl CriticalConstruction {
    /// The planted layer `h ↦ tanh(W h + b_±)` (W̃ = 1, b̃ = 0).
    pub fn layer(&self, plus: bool) -> ResidualLayer {
        let b = if plus { self.b_plus } else { self.b_minus };
        ResidualLayer {
            w: Mat64::from_rows(&[vec![self.w]]).expect("finite"),
            w_tilde: Mat64::identity(1),
            b: Vec64(vec![b]),
            b_tilde: Vec64::zeros(1),
            act: Activation::Tanh,
        }
    }

    /// `ε + δ W tanh′(W h + b)` at the target, for `δ = α ε`.
    pub fn layer_derivative(&self, eps: f64, plus: bool) -> f64 {
        let b = if plus { self.b_plus } else { self.b_minus };
        eps + self.alpha * eps * self.w * Activation::Tanh.deriv(self.w * self.h_prev + b)
    }

    /// `prefix` with the planted layer appended, run at `(ε, δ = αε)`. A prefix
    /// with layers must already run at that pair, since `h_prev` was taken from it.
    pub fn assemble(&self, prefix: &ResNetModel, eps: f64, plus: bool) -> Result<ResNetModel> {
        let delta = self.alpha * eps;
        let same = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs());
        if !prefix.layers.is_empty() && !(same(prefix.eps, eps) && same(prefix.delta, delta)) {
            return Err(Error::InvalidArgument(format!(
                "prefix runs at (ε, δ) = ({}, {}), planted layer needs ({eps}, {delta})",
                prefix.eps, prefix.delta
            )));
        }
        let mut layers = prefix.layers.clone();
        layers.push(self.layer(plus));
        ResNetModel::new(eps, self.alpha * eps, prefix.input.clone(), layers, prefix.output.clone())
    }
}

/// Chooses `b_± = ±(tanh′)^{−1}(−1/(αW)) − W·h_{l−1}(target_x)` so the next
/// layer's derivative vanishes at `target_x`. Needs `W ≤ −1/α`.
pub fn construct_critical_point(alpha: f64, w: f64, target_x: f64, prefix: &ResNetModel) -> Result<CriticalConstruction> {
    if prefix.n_in() != 1 || prefix.n_hid() != 1 {
        return Err(Error::InvalidArgument("critical-point construction needs a 1-D prefix".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("α must be positive, got {alpha}")));
    }
    if prefix.layers.iter().any(|l| l.act != Activation::Tanh) {
        return Err(Error::InvalidArgument("construction assumes tanh layers".into()));
    }
    if w > -1.0 / alpha {
        return Err(Error::NoSolution(format!("need W ≤ −1/α = {}, got W = {w}", -1.0 / alpha)));
    }
    let (_, trace) = prefix.forward(&[target_x])?;
    let h_prev = trace.states.last().unwrap()[0];
    let v = (-1.0 / (alpha * w)).min(1.0);
    let y = invdtanh(v)?;
    Ok(CriticalConstruction {
        layer_index: prefix.depth() + 1,
        w,
        b_plus: y - w * h_prev,
        b_minus: -y - w * h_prev,
        target_x,
        alpha,
        h_prev,
    })
}
