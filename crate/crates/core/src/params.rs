//! Layer-grouped parameter storage with frozen pre-trained references.
//!
//! Parameters are opaque flat `f64` vectors, one per [`LayerParams`]. A layer
//! may carry a copy of its pre-trained values; that copy is the rollback
//! anchor θ₀. Layers created after pre-training (a downstream head) carry no
//! anchor and are exempt from rollback.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub name: String,
    /// Depth index, 0 for the shallowest layer. A weight matrix and its bias
    /// share one index.
    pub layer_index: usize,
    pub values: Vec<f64>,
    pub pretrained: Option<Vec<f64>>,
}

impl LayerParams {
    pub fn new(name: impl Into<String>, layer_index: usize, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            layer_index,
            values,
            pretrained: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn has_pretrained(&self) -> bool {
        self.pretrained.is_some()
    }

    /// ‖θ − θ₀‖₂ for this layer.
    pub fn discrepancy(&self) -> Result<f64> {
        Ok(self.squared_discrepancy()?.sqrt())
    }

    fn squared_discrepancy(&self) -> Result<f64> {
        let anchor = self
            .pretrained
            .as_ref()
            .ok_or_else(|| Error::MissingPretrained(self.name.clone()))?;
        Ok(self
            .values
            .iter()
            .zip(anchor)
            .map(|(v, a)| (v - a) * (v - a))
            .sum())
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config(format!("layer `{}` is empty", self.name)));
        }
        if let Some(anchor) = &self.pretrained {
            if anchor.len() != self.values.len() {
                return Err(Error::shape(
                    format!("pre-trained reference of layer `{}`", self.name),
                    self.values.len(),
                    anchor.len(),
                ));
            }
            if anchor.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "pre-trained reference of layer `{}`",
                    self.name
                )));
            }
        }
        if self.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("layer `{}`", self.name)));
        }
        Ok(())
    }
}

/// An ordered stack of layers plus the depth normaliser `n` used by the
/// penalty schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
    pub n: usize,
}

impl ModelParams {
    pub fn new(layers: Vec<LayerParams>, n: usize) -> Result<Self> {
        let model = Self { layers, n };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("depth normaliser n must be >= 1".into()));
        }
        let mut prev = 0;
        for (k, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if layer.layer_index > self.n {
                return Err(Error::LayerIndexOutOfRange {
                    index: layer.layer_index,
                    n: self.n,
                });
            }
            if k > 0 && layer.layer_index < prev {
                return Err(Error::Config(format!(
                    "layer `{}` has index {} after index {}",
                    layer.name, layer.layer_index, prev
                )));
            }
            prev = layer.layer_index;
        }
        Ok(())
    }

    /// Overwrites every layer's pre-trained reference with a copy of its
    /// current values.
    pub fn snapshot_as_pretrained(&mut self) {
        for layer in &mut self.layers {
            layer.pretrained = Some(layer.values.clone());
        }
    }

    /// Global ‖θ − θ₀‖₂ over all layers concatenated.
    pub fn discrepancy_norm(&self) -> Result<f64> {
        let mut total = 0.0;
        for layer in &self.layers {
            total += layer.squared_discrepancy()?;
        }
        Ok(total.sqrt())
    }

    pub fn layer_discrepancies(&self) -> Result<Vec<f64>> {
        self.layers.iter().map(LayerParams::discrepancy).collect()
    }

    /// Like [`discrepancy_norm`](Self::discrepancy_norm) but restricted to
    /// layers that have a pre-trained reference.
    pub fn anchored_discrepancy_norm(&self) -> f64 {
        self.layers
            .iter()
            .filter_map(|l| l.squared_discrepancy().ok())
            .sum::<f64>()
            .sqrt()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(LayerParams::len).sum()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerParams> {
        self.layers.iter().find(|l| l.name == name)
    }
}
