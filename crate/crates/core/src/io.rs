//! JSON model documents.
//!
//! Matrices are nested row-major arrays. Per-map `activation` entries are
//! optional and fall back to the document-level `activation`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Activation, AffineSigmaMap, ResNetModel, ResidualLayer};
use crate::numerics::{Mat64, Vec64};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapJson {
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    #[serde(rename = "W_tilde")]
    pub w_tilde: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub b_tilde: Vec<f64>,
    #[serde(default)]
    pub affine_only: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerJson {
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    #[serde(rename = "W_tilde")]
    pub w_tilde: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub b_tilde: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelJson {
    pub eps: f64,
    pub delta: f64,
    pub n_in: usize,
    pub n_hid: usize,
    pub n_out: usize,
    pub activation: Activation,
    pub input: MapJson,
    pub layers: Vec<LayerJson>,
    pub output: MapJson,
}

fn mat(rows: &[Vec<f64>], what: &str) -> Result<Mat64> {
    Mat64::from_rows(rows).map_err(|e| Error::InvalidConfig(format!("{what}: {e}")))
}

fn map_to_json(m: &AffineSigmaMap, default: Activation) -> MapJson {
    MapJson {
        w: m.w.to_rows(),
        w_tilde: m.w_tilde.to_rows(),
        b: m.b.0.clone(),
        b_tilde: m.b_tilde.0.clone(),
        affine_only: m.affine_only,
        activation: (m.act != default).then_some(m.act),
    }
}

fn map_from_json(j: &MapJson, default: Activation, what: &str) -> Result<AffineSigmaMap> {
    AffineSigmaMap::new(
        mat(&j.w, &format!("{what}.W"))?,
        mat(&j.w_tilde, &format!("{what}.W_tilde"))?,
        Vec64(j.b.clone()),
        Vec64(j.b_tilde.clone()),
        j.activation.unwrap_or(default),
        j.affine_only,
    )
}

impl ModelJson {
    pub fn from_model(m: &ResNetModel) -> Self {
        // The most common layer activation becomes the document default.
        let activation = m
            .layers
            .first()
            .map(|l| l.act)
            .unwrap_or(if m.input.affine_only { m.output.act } else { m.input.act });
        ModelJson {
            eps: m.eps,
            delta: m.delta,
            n_in: m.n_in(),
            n_hid: m.n_hid(),
            n_out: m.n_out(),
            activation,
            input: map_to_json(&m.input, activation),
            layers: m
                .layers
                .iter()
                .map(|l| LayerJson {
                    w: l.w.to_rows(),
                    w_tilde: l.w_tilde.to_rows(),
                    b: l.b.0.clone(),
                    b_tilde: l.b_tilde.0.clone(),
                    activation: (l.act != activation).then_some(l.act),
                })
                .collect(),
            output: map_to_json(&m.output, activation),
        }
    }

    pub fn to_model(&self) -> Result<ResNetModel> {
        let input = map_from_json(&self.input, self.activation, "input")?;
        let output = map_from_json(&self.output, self.activation, "output")?;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                ResidualLayer::new(
                    mat(&l.w, &format!("layers[{i}].W"))?,
                    mat(&l.w_tilde, &format!("layers[{i}].W_tilde"))?,
                    Vec64(l.b.clone()),
                    Vec64(l.b_tilde.clone()),
                    l.activation.unwrap_or(self.activation),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let m = ResNetModel::new(self.eps, self.delta, input, layers, output)?;
        if (m.n_in(), m.n_hid(), m.n_out()) != (self.n_in, self.n_hid, self.n_out) {
            return Err(Error::InvalidConfig(format!(
                "declared dims ({}, {}, {}) disagree with matrices ({}, {}, {})",
                self.n_in,
                self.n_hid,
                self.n_out,
                m.n_in(),
                m.n_hid(),
                m.n_out()
            )));
        }
        Ok(m)
    }
}

pub fn model_to_json_string(m: &ResNetModel) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ModelJson::from_model(m))?)
}

pub fn model_from_json_str(s: &str) -> Result<ResNetModel> {
    let doc: ModelJson = serde_json::from_str(s).map_err(|e| Error::InvalidConfig(format!("model JSON: {e}")))?;
    doc.to_model()
}

pub fn save_model(m: &ResNetModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_json_string(m)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ResNetModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read model {}: {e}", path.display())))?;
    model_from_json_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_model() {
        let m = ResNetModel::new(
            0.5,
            0.25,
            AffineSigmaMap::activated(Mat64::from_rows(&[vec![1.0, 2.0], vec![0.0, -1.0]]).unwrap(), Vec64(vec![0.1, 0.2]), Activation::Tanh).unwrap(),
            vec![ResidualLayer::new(
                Mat64::from_rows(&[vec![0.3, 0.4]]).unwrap(),
                Mat64::from_rows(&[vec![1.5], vec![-0.5]]).unwrap(),
                Vec64(vec![0.0]),
                Vec64(vec![0.1, -0.1]),
                Activation::Tanh,
            )
            .unwrap()],
            AffineSigmaMap::activated(Mat64::from_rows(&[vec![1.0, 1.0]]).unwrap(), Vec64(vec![0.0]), Activation::Sigmoid).unwrap(),
        )
        .unwrap();
        let text = model_to_json_string(&m).unwrap();
        assert!(text.contains("\"W_tilde\"") && text.contains("\"affine_only\""));
        assert_eq!(model_from_json_str(&text).unwrap(), m);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_dims() {
        let bad = r#"{"eps":1,"delta":1,"n_in":1,"n_hid":1,"n_out":1,"activation":"tanh","extra":0,
            "input":{"W":[[1]],"W_tilde":[[1]],"b":[0],"b_tilde":[0],"affine_only":true},
            "layers":[],"output":{"W":[[1]],"W_tilde":[[1]],"b":[0],"b_tilde":[0],"affine_only":true}}"#;
        assert!(matches!(model_from_json_str(bad), Err(Error::InvalidConfig(_))));
        let wrong_dims = bad.replace(",\"extra\":0", "").replace("\"n_in\":1", "\"n_in\":2");
        assert!(matches!(model_from_json_str(&wrong_dims), Err(Error::InvalidConfig(_))));
    }
}
