use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{Example, ModelError};

/// `y = W x + b` over 64-bit floats, with optional class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineModel {
    #[serde(rename = "type", default = "affine_tag")]
    kind: String,
    feature_order: Vec<String>,
    #[serde(rename = "W")]
    weights: Vec<Vec<f64>>,
    #[serde(rename = "b")]
    bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_labels: Option<Vec<String>>,
}

fn affine_tag() -> String {
    "affine".to_string()
}

/// Per-example `(label, score)` pairs, highest score first.
pub type Classification = Vec<(String, f64)>;

impl AffineModel {
    pub fn new(
        feature_order: Vec<String>,
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
        class_labels: Option<Vec<String>>,
    ) -> Result<Self, ModelError> {
        let model = Self {
            kind: affine_tag(),
            feature_order,
            weights,
            bias,
            class_labels,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let model: Self =
            serde_json::from_str(text).map_err(|e| ModelError::InvalidModel(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("affine model serializes")
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.kind != "affine" {
            return Err(ModelError::InvalidModel(format!(
                "type is {:?}, expected \"affine\"",
                self.kind
            )));
        }
        if self.weights.len() != self.bias.len() {
            return Err(ModelError::InvalidModel(format!(
                "W has {} rows but b has {} entries",
                self.weights.len(),
                self.bias.len()
            )));
        }
        let in_dim = self.feature_order.len();
        if let Some(i) = self.weights.iter().position(|row| row.len() != in_dim) {
            return Err(ModelError::InvalidModel(format!(
                "W row {i} has {} columns, feature_order has {in_dim}",
                self.weights[i].len()
            )));
        }
        if let Some(labels) = &self.class_labels {
            if labels.len() != self.out_dim() {
                return Err(ModelError::InvalidModel(format!(
                    "{} class labels for output dimension {}",
                    labels.len(),
                    self.out_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.feature_order.len()
    }

    pub fn out_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn feature_order(&self) -> &[String] {
        &self.feature_order
    }

    pub fn class_labels(&self) -> Option<&[String]> {
        self.class_labels.as_deref()
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Returns a copy with `delta` added to every bias entry.
    pub fn shifted(&self, delta: f64) -> Self {
        let mut m = self.clone();
        m.bias.iter_mut().for_each(|b| *b += delta);
        m
    }

    fn predict_row(&self, row: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(row).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }

    /// One output row per input row, order preserved.
    pub fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ModelError> {
        if let Some((row, r)) = rows
            .iter()
            .enumerate()
            .find(|(_, r)| r.len() != self.in_dim())
        {
            return Err(ModelError::ShapeMismatch {
                row,
                expected: self.in_dim(),
                got: r.len(),
            });
        }
        Ok(rows.iter().map(|r| self.predict_row(r)).collect())
    }

    /// Extracts `feature_order` from each example as single floats.
    pub fn rows_from_examples(&self, examples: &[Example]) -> Result<Vec<Vec<f64>>, ModelError> {
        examples
            .iter()
            .map(|ex| {
                self.feature_order
                    .iter()
                    .map(|name| {
                        ex.get(name)
                            .ok_or_else(|| ModelError::MissingFeature(name.clone()))?
                            .as_single_f64()
                            .ok_or_else(|| ModelError::InvalidFeature(name.clone()))
                    })
                    .collect()
            })
            .collect()
    }

    pub fn classify(&self, examples: &[Example]) -> Result<Vec<Classification>, ModelError> {
        self.class_labels.as_ref().ok_or(ModelError::NotAClassifier)?;
        let rows = self.rows_from_examples(examples)?;
        rows.iter()
            .map(|row| self.classification(&self.predict_row(row)))
            .collect()
    }

    /// Turns one output row of [`predict`](Self::predict) into labelled
    /// softmax scores, highest first, ties broken by label.
    pub fn classification(&self, logits: &[f64]) -> Result<Classification, ModelError> {
        let labels = self.class_labels.as_ref().ok_or(ModelError::NotAClassifier)?;
        let mut scored: Classification = labels.iter().cloned().zip(softmax(logits)).collect();
        scored.sort_by(|(la, sa), (lb, sb)| {
            sb.partial_cmp(sa).unwrap_or(Ordering::Equal).then_with(|| la.cmp(lb))
        });
        Ok(scored)
    }

    pub fn regress(&self, examples: &[Example]) -> Result<Vec<f64>, ModelError> {
        if self.out_dim() != 1 {
            return Err(ModelError::NotARegressor(self.out_dim()));
        }
        let rows = self.rows_from_examples(examples)?;
        Ok(rows.iter().map(|row| self.predict_row(row)[0]).collect())
    }
}

/// Softmax with the maximum logit subtracted before exponentiation.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
