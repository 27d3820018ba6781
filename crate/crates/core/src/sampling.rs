//! Random models and vector fields for sweeps, self-checks and tests.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::models::{Activation, AffineSigmaMap, NeuralOdeSpec, ResNetModel, ResidualLayer};
use crate::numerics::{Mat64, Vec64};
use crate::rng::Rng;

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, range: f64) -> Mat64 {
    let data = (0..rows * cols).map(|_| rng.random_range(-range..=range)).collect();
    Mat64::from_row_major(rows, cols, data).expect("sized buffer")
}

pub fn random_vec(rng: &mut Rng, n: usize, range: f64) -> Vec64 {
    Vec64((0..n).map(|_| rng.random_range(-range..=range)).collect())
}

/// Rescales rows whose absolute sum exceeds `max` so that `‖A‖_∞ ≤ max`.
pub fn cap_inf_norm(a: &Mat64, max: f64) -> Mat64 {
    let scale: Vec<f64> = (0..a.rows())
        .map(|i| {
            let s: f64 = a.row(i).iter().map(|v| v.abs()).sum();
            if s > max { max / s } else { 1.0 }
        })
        .collect();
    a.scale_rows(&scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapShape {
    Identity,
    Affine,
    Activated,
}

/// Architecture and ranges for [`random_model`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSampler {
    pub n_in: usize,
    pub n_hid: usize,
    pub n_out: usize,
    /// Inner width of every residual branch.
    pub width: usize,
    pub depth: usize,
    pub act: Activation,
    pub weight_range: f64,
    pub eps: f64,
    pub delta: f64,
    pub input: MapShape,
    pub output: MapShape,
}

fn random_map(rng: &mut Rng, shape: MapShape, n_in: usize, n_out: usize, range: f64, act: Activation) -> Result<AffineSigmaMap> {
    match shape {
        MapShape::Identity => Ok(AffineSigmaMap::identity(n_in)),
        MapShape::Affine => AffineSigmaMap::affine(random_matrix(rng, n_out, n_in, range), random_vec(rng, n_out, range)),
        MapShape::Activated => {
            let w = random_matrix(rng, n_out, n_out.max(1), range);
            let inner = random_matrix(rng, n_out, n_in, range);
            AffineSigmaMap::new(inner, w, random_vec(rng, n_out, range), random_vec(rng, n_out, range), act, false)
        }
    }
}

pub fn random_layer(rng: &mut Rng, n_hid: usize, width: usize, range: f64, act: Activation) -> Result<ResidualLayer> {
    ResidualLayer::new(
        random_matrix(rng, width, n_hid, range),
        random_matrix(rng, n_hid, width, range),
        random_vec(rng, width, range),
        random_vec(rng, n_hid, range),
        act,
    )
}

pub fn random_model(rng: &mut Rng, s: &ModelSampler) -> Result<ResNetModel> {
    let input = random_map(rng, s.input, s.n_in, s.n_hid, s.weight_range, s.act)?;
    let layers = (0..s.depth)
        .map(|_| random_layer(rng, s.n_hid, s.width, s.weight_range, s.act))
        .collect::<Result<Vec<_>>>()?;
    let output = random_map(rng, s.output, s.n_hid, s.n_out, s.weight_range, s.act)?;
    ResNetModel::new(s.eps, s.delta, input, layers, output)
}

fn pick_shape(rng: &mut Rng) -> MapShape {
    if rng.random_bool(0.5) {
        MapShape::Affine
    } else {
        MapShape::Activated
    }
}

/// Scalar model drawn from the gradient-check corpus: `n_in, n_hid, m_l ≤ 4`,
/// `1 ≤ L ≤ 5`, tanh or sigmoid, entries in `[−2, 2]`, `ε, δ ∈ [0, 1.5]`.
pub fn corpus_model(rng: &mut Rng) -> Result<ResNetModel> {
    let s = ModelSampler {
        n_in: rng.random_range(1..=4),
        n_hid: rng.random_range(1..=4),
        n_out: 1,
        width: rng.random_range(1..=4),
        depth: rng.random_range(1..=5),
        act: if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Sigmoid },
        weight_range: 2.0,
        eps: rng.random_range(0.0..=1.5),
        delta: rng.random_range(0.0..=1.5),
        input: pick_shape(rng),
        output: pick_shape(rng),
    };
    random_model(rng, &s)
}

/// Autonomous canonical field with `‖W‖_∞, ‖W̃‖_∞ ≤ 1`, horizon in `(0.5, 1]`,
/// affine λ and λ̃ whose rows have absolute sum at most 1.
pub fn autonomous_spec(rng: &mut Rng, n_in: usize, n_hid: usize, width: usize, act: Activation) -> Result<NeuralOdeSpec> {
    let field = ResidualLayer::new(
        cap_inf_norm(&random_matrix(rng, width, n_hid, 1.0), 1.0),
        cap_inf_norm(&random_matrix(rng, n_hid, width, 1.0), 1.0),
        random_vec(rng, width, 1.0),
        random_vec(rng, n_hid, 0.5),
        act,
    )?;
    let horizon = 1.0 - 0.5 * rng.random_range(0.0..1.0);
    let input = AffineSigmaMap::affine(cap_inf_norm(&random_matrix(rng, n_hid, n_in, 1.0), 1.0), random_vec(rng, n_hid, 0.5))?;
    let output = AffineSigmaMap::affine(cap_inf_norm(&random_matrix(rng, 1, n_hid, 1.0), 1.0), random_vec(rng, 1, 0.5))?;
    NeuralOdeSpec::autonomous(field, horizon, input, output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn caps_and_corpus_ranges() {
        let mut rng = rng_for(5, 0);
        let a = cap_inf_norm(&random_matrix(&mut rng, 3, 4, 2.0), 1.0);
        assert!(a.norm_inf() <= 1.0 + 1e-15);
        for _ in 0..50 {
            let m = corpus_model(&mut rng).unwrap();
            assert!(m.n_in() <= 4 && m.n_hid() <= 4 && (1..=5).contains(&m.depth()));
            assert_eq!(m.n_out(), 1);
        }
        let s = autonomous_spec(&mut rng, 1, 2, 3, Activation::Tanh).unwrap();
        assert!(s.horizon_t > 0.5 && s.horizon_t <= 1.0);
        assert!(s.segments[0].w.norm_inf() <= 1.0 + 1e-15);
    }
}
