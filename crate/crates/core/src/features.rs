//! Turns per-layer token activations into the multimodal feature vector.
//!
//! Each modality of each tapped layer is squashed with `tanh`, mean-pooled
//! over tokens and L2-normalized. The per-layer unit vectors are then
//! concatenated as `[v_1, t_1, ..., v_M, t_M]` and scaled by `1/sqrt(2M)`,
//! which makes the result unit-norm again.
//!
//! Token sums go through an exactly-rounded accumulator so that the output
//! does not depend on token order.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{DatasetManifest, FeatureMatrix, MANIFEST_VERSION};
use crate::numeric::exact_sum;

/// Token activations of one tapped layer, one row per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerActivations {
    #[serde(default)]
    pub layer: i64,
    pub visual: Vec<Vec<f32>>,
    pub text: Vec<Vec<f32>>,
}

impl LayerActivations {
    pub fn hidden_dim(&self) -> Option<usize> {
        self.visual.first().or(self.text.first()).map(Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeaturePair {
    pub visual: Vec<f64>,
    pub text: Vec<f64>,
}

/// `L2-normalize(mean over tokens(tanh(z)))` for one modality.
pub fn pool_tokens(tokens: &[Vec<f32>], what: &str) -> Result<Vec<f64>> {
    let dim = match tokens.first() {
        Some(t) => t.len(),
        None => return Err(Error::InvalidArgument(format!("{what}: no tokens"))),
    };
    if dim == 0 {
        return Err(Error::InvalidArgument(format!("{what}: zero hidden dim")));
    }
    if let Some(bad) = tokens.iter().position(|t| t.len() != dim) {
        return Err(Error::DimensionMismatch(format!(
            "{what}: token {bad} has dim {}, expected {dim}",
            tokens[bad].len()
        )));
    }
    let n = tokens.len() as f64;
    let mut pooled = Vec::with_capacity(dim);
    let mut column = Vec::with_capacity(tokens.len());
    for d in 0..dim {
        column.clear();
        for t in tokens {
            let z = t[d];
            if !z.is_finite() {
                return Err(Error::NonFinite(format!("{what} activations")));
            }
            column.push(f64::from(z).tanh());
        }
        pooled.push(exact_sum(&column) / n);
    }
    let norm = exact_sum(&pooled.iter().map(|v| v * v).collect::<Vec<_>>()).sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroNorm(what.to_string()));
    }
    Ok(pooled.into_iter().map(|v| v / norm).collect())
}

pub fn aggregate_layer(acts: &LayerActivations) -> Result<LayerFeaturePair> {
    let visual = pool_tokens(&acts.visual, "visual tokens")?;
    let text = pool_tokens(&acts.text, "text tokens")?;
    if visual.len() != text.len() {
        return Err(Error::DimensionMismatch(format!(
            "visual dim {} != text dim {}",
            visual.len(),
            text.len()
        )));
    }
    Ok(LayerFeaturePair { visual, text })
}

/// Concatenates the per-layer pairs and scales by `1/sqrt(2M)`.
pub fn compose_multimodal(layers: &[LayerFeaturePair]) -> Result<Vec<f32>> {
    let first = layers
        .first()
        .ok_or_else(|| Error::InvalidArgument("at least one layer is required".into()))?;
    let dim = first.visual.len();
    for (i, pair) in layers.iter().enumerate() {
        if pair.visual.len() != dim || pair.text.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "layer {i} has dims ({}, {}), expected {dim}",
                pair.visual.len(),
                pair.text.len()
            )));
        }
    }
    let scale = 1.0 / ((2 * layers.len()) as f64).sqrt();
    let mut out = Vec::with_capacity(2 * layers.len() * dim);
    for pair in layers {
        out.extend(pair.visual.iter().map(|v| (v * scale) as f32));
        out.extend(pair.text.iter().map(|v| (v * scale) as f32));
    }
    Ok(out)
}

/// One sample of the desk-scale activation fixture format.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationSample {
    pub sample_id: String,
    #[serde(default)]
    pub task_label: String,
    pub layers: Vec<LayerActivations>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationFixture {
    #[serde(default)]
    pub reference_model: String,
    pub samples: Vec<ActivationSample>,
}

impl ActivationFixture {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }

    /// Aggregates every sample into a feature row and builds the matching manifest.
    pub fn to_features(&self) -> Result<(FeatureMatrix, DatasetManifest)> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("fixture has no samples".into()))?;
        let layer_indices: Vec<i64> = first.layers.iter().map(|l| l.layer).collect();
        let hidden_dim = first
            .layers
            .first()
            .and_then(LayerActivations::hidden_dim)
            .ok_or_else(|| Error::InvalidArgument("fixture sample has no layers".into()))?;
        for s in &self.samples {
            let ids: Vec<i64> = s.layers.iter().map(|l| l.layer).collect();
            if ids != layer_indices {
                return Err(Error::Invariant(format!(
                    "sample {} taps layers {ids:?}, expected {layer_indices:?}",
                    s.sample_id
                )));
            }
        }
        let rows = self
            .samples
            .par_iter()
            .map(|s| {
                let pairs = s.layers.iter().map(aggregate_layer).collect::<Result<Vec<_>>>()?;
                compose_multimodal(&pairs)
            })
            .collect::<Result<Vec<_>>>()?;
        let matrix = FeatureMatrix::from_rows(&rows)?;
        let labeled = self.samples.iter().any(|s| !s.task_label.is_empty());
        let manifest = DatasetManifest {
            version: MANIFEST_VERSION,
            sample_ids: self.samples.iter().map(|s| s.sample_id.clone()).collect(),
            task_labels: if labeled {
                self.samples.iter().map(|s| s.task_label.clone()).collect()
            } else {
                Vec::new()
            },
            num_layers_tapped: layer_indices.len(),
            layer_indices,
            reference_model: self.reference_model.clone(),
            hidden_dim,
        };
        manifest.validate(matrix.n_samples(), matrix.feature_dim())?;
        Ok((matrix, manifest))
    }
}
