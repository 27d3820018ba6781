//! Closed-form proximity bounds and their empirical counterparts.
//!
//! - Euler: a ResNet with `ε = 1`, `δ = T/L` against the flow of its vector field.
//! - MLP: a ResNet with `0 < ε < 1` against the same layers at `ε = 0`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Activation, NeuralOdeSpec, ResNetModel};
use crate::numerics::Vec64;
use crate::regimes::map_sup_norm;
use crate::topology::GridDomain;
use crate::numerics::BoxDomain;

/// Norm data of a canonical field `W̃ σ(W h + b) + b̃`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanonicalField {
    pub omega_inf: f64,
    pub omega_tilde_inf: f64,
    pub beta_tilde_inf: f64,
    pub s_sigma: f64,
    pub k_sigma: f64,
}

impl CanonicalField {
    /// `(K_θ, M_θ) = (K_σ ω̃ ω, ω̃ K_σ (ω̃ S_σ + β̃))`.
    pub fn general_constants(&self) -> (f64, f64) {
        let k_theta = self.k_sigma * self.omega_tilde_inf * self.omega_inf;
        let m_theta = self.omega_tilde_inf * self.k_sigma * (self.omega_tilde_inf * self.s_sigma + self.beta_tilde_inf);
        (k_theta, m_theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerBoundInputs {
    pub k_lambda_tilde: f64,
    pub k_theta: f64,
    pub m_theta: f64,
    pub horizon_t: f64,
    pub delta: f64,
    pub canonical: Option<CanonicalField>,
}

impl EulerBoundInputs {
    /// Constants of an autonomous canonical spec discretized with `L` steps.
    pub fn from_spec(spec: &NeuralOdeSpec, big_l: usize) -> Result<Self> {
        if spec.segments.len() != 1 || spec.linear_coeff != 0.0 {
            return Err(Error::InvalidArgument("Euler bound inputs need an autonomous canonical field".into()));
        }
        let f = &spec.segments[0];
        let canonical = CanonicalField {
            omega_inf: f.w.norm_inf(),
            omega_tilde_inf: f.w_tilde.norm_inf(),
            beta_tilde_inf: f.b_tilde.norm_inf(),
            s_sigma: f.act.s_sigma(),
            k_sigma: f.act.k_sigma(),
        };
        let (k_theta, m_theta) = canonical.general_constants();
        Ok(EulerBoundInputs {
            k_lambda_tilde: spec.output.lipschitz_bound(),
            k_theta,
            m_theta,
            horizon_t: spec.horizon_t,
            delta: spec.horizon_t / big_l as f64,
            canonical: Some(canonical),
        })
    }
}

/// `K_λ̃ · (M_θ δ / 2K_θ) · (e^{K_θ T} − 1)`, extended by `K_λ̃ M_θ δ T / 2` at `K_θ = 0`.
pub fn euler_bound_general(inp: &EulerBoundInputs) -> f64 {
    let EulerBoundInputs { k_lambda_tilde, k_theta, m_theta, horizon_t, delta, .. } = *inp;
    if k_theta == 0.0 {
        return k_lambda_tilde * m_theta * delta * horizon_t / 2.0;
    }
    k_lambda_tilde * (m_theta * delta / (2.0 * k_theta)) * (k_theta * horizon_t).exp_m1()
}

/// `K_λ̃ · ((ω̃ S_σ + β̃)·δ / 2ω) · (e^{K_σ ω̃ ω T} − 1)`, extended continuously to `ω = 0`.
///
/// This is [`euler_bound_general`] under [`CanonicalField::general_constants`]. That
/// `M_θ` carries no factor of `ω`, so the value dominates the sharper
/// `K_θ·sup‖f‖` second-derivative estimate only while `ω ≤ 1`.
pub fn euler_bound_canonical(c: &CanonicalField, k_lambda_tilde: f64, horizon_t: f64, delta: f64) -> f64 {
    let sup_f = c.omega_tilde_inf * c.s_sigma + c.beta_tilde_inf;
    if c.omega_inf == 0.0 {
        return k_lambda_tilde * sup_f * delta / 2.0 * c.k_sigma * c.omega_tilde_inf * horizon_t;
    }
    let rate = c.k_sigma * c.omega_tilde_inf * c.omega_inf * horizon_t;
    k_lambda_tilde * (sup_f * delta / (2.0 * c.omega_inf)) * rate.exp_m1()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpBoundInputs {
    pub eps: f64,
    pub delta: f64,
    pub big_l: usize,
    pub s_f: f64,
    pub k_f: f64,
    pub s_lambda: f64,
    pub k_lambda_tilde: f64,
}

impl MlpBoundInputs {
    /// Constants read off a canonical model, each taken over its own component
    /// (layers for `S_f`, `K_f`; λ on `domain` for `S_λ`; λ̃ for `K_λ̃`).
    pub fn from_model(model: &ResNetModel, domain: &BoxDomain) -> Self {
        let s_f = model
            .layers
            .iter()
            .map(|l| l.w_tilde.norm_inf() * l.act.s_sigma() + l.b_tilde.norm_inf())
            .fold(0.0, f64::max);
        let k_f = model
            .layers
            .iter()
            .map(|l| l.w_tilde.norm_inf() * l.act.k_sigma() * l.w.norm_inf())
            .fold(0.0, f64::max);
        MlpBoundInputs {
            eps: model.eps,
            delta: model.delta,
            big_l: model.depth(),
            s_f,
            k_f,
            s_lambda: map_sup_norm(&model.input, domain),
            k_lambda_tilde: model.output.lipschitz_bound(),
        }
    }
}

/// `ε K_λ̃ ((δK_f)^{L−1} S_λ + (S_λ + δS_f/(1−ε)) Σ_{j=0}^{L−2} (δK_f)^j)`.
pub fn mlp_bound_explicit(inp: &MlpBoundInputs) -> Result<f64> {
    let MlpBoundInputs { eps, delta, big_l, s_f, k_f, s_lambda, k_lambda_tilde } = *inp;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("MLP bound needs 0 < ε < 1, got {eps}")));
    }
    if big_l == 0 {
        return Err(Error::InvalidArgument("MLP bound needs L ≥ 1".into()));
    }
    let q = delta * k_f;
    let hidden = s_lambda + delta * s_f / (1.0 - eps);
    let geometric: f64 = (0..big_l.saturating_sub(1)).map(|j| q.powi(j as i32)).sum();
    Ok(eps * k_lambda_tilde * (q.powi(big_l as i32 - 1) * s_lambda + hidden * geometric))
}

/// `(S_f, K_f, S_λ, K_λ̃)` with `S_f = S_λ = ω̃ S_σ + β̃` and `K_f = K_λ̃ = ω̃ K_σ ω`.
pub fn mlp_bound_canonical_constants(act: Activation, omega_inf: f64, omega_tilde_inf: f64, beta_tilde_inf: f64) -> (f64, f64, f64, f64) {
    let s = omega_tilde_inf * act.s_sigma() + beta_tilde_inf;
    let k = omega_tilde_inf * act.k_sigma() * omega_inf;
    (s, k, s, k)
}

/// Vector-valued evaluator usable from worker threads.
pub type Evaluator<'a> = dyn Fn(&[f64]) -> Result<Vec64> + Sync + 'a;

/// `max_x ‖A(x) − B(x)‖_∞` over the lattice points of `grid`.
pub fn empirical_sup_distance(a: &Evaluator, b: &Evaluator, grid: &GridDomain) -> Result<f64> {
    let dists: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = grid.point(i);
            let (ya, yb) = (a(&x)?, b(&x)?);
            if ya.len() != yb.len() {
                return Err(Error::Dimension(format!("evaluators return {} and {} outputs", ya.len(), yb.len())));
            }
            Ok(ya.sub(&yb).norm_inf())
        })
        .collect::<Result<_>>()?;
    Ok(dists.into_iter().fold(0.0, f64::max))
}

/// Relative slack on the bound comparison. Some bounds are attained exactly
/// (one layer, affine λ̃), where the two sides differ only by rounding.
pub const BOUND_ROUNDOFF: f64 = 1e-12;

/// `empirical ≤ theoretical` up to [`BOUND_ROUNDOFF`].
pub fn within_bound(empirical: f64, theoretical: f64) -> bool {
    empirical <= theoretical * (1.0 + BOUND_ROUNDOFF) + f64::MIN_POSITIVE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub kind: String,
    pub eps_or_delta: f64,
    #[serde(rename = "L")]
    pub big_l: usize,
    pub theoretical: f64,
    pub empirical: f64,
    pub margin: f64,
    pub pass: bool,
    #[serde(skip)]
    pub samples: usize,
    #[serde(skip)]
    pub domain: Option<BoxDomain>,
}

impl BoundReport {
    pub fn new(kind: &str, eps_or_delta: f64, big_l: usize, theoretical: f64, empirical: f64, grid: &GridDomain) -> Self {
        let margin = theoretical - empirical;
        BoundReport {
            kind: kind.to_string(),
            eps_or_delta,
            big_l,
            theoretical,
            empirical,
            margin,
            pass: within_bound(empirical, theoretical),
            samples: grid.len(),
            domain: Some(grid.bounds()),
        }
    }
}

/// Writes reports as CSV with header `kind,eps_or_delta,L,theoretical,empirical,margin,pass`.
pub fn write_bound_csv<W: Write>(out: W, reports: &[BoundReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
