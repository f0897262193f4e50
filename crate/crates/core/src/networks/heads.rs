use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::PatchFeatureSet;
use crate::params::ParamBuilder;
use crate::{Error, Result};

/// Added under the square root of the embedding norm.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            embed_dim: 256,
        }
    }
}

/// One two-layer perceptron per patch layer, mapping raw patch features to
/// unit-length embeddings.
#[derive(Debug, Clone)]
pub struct ProjectionHeads {
    layers: Vec<usize>,
    mlps: Vec<(Linear, Linear)>,
    embed_dim: usize,
}

impl ProjectionHeads {
    /// `layers` pairs each patch-layer id with its channel count.
    pub fn new(pb: &mut ParamBuilder, name: &str, layers: &[(usize, usize)], config: &HeadConfig) -> Result<Self> {
        let mut mlps = Vec::with_capacity(layers.len());
        for &(layer, channels) in layers {
            mlps.push((
                Linear::new(pb, &format!("{name}.l{layer}.fc1"), channels, config.hidden)?,
                Linear::new(pb, &format!("{name}.l{layer}.fc2"), config.hidden, config.embed_dim)?,
            ));
        }
        Ok(Self {
            layers: layers.iter().map(|&(l, _)| l).collect(),
            mlps,
            embed_dim: config.embed_dim,
        })
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Embeds raw `(S, C_l)` features of one layer into `(S, K)` unit rows.
    pub fn project_layer(&self, layer: usize, features: &Tensor) -> Result<Tensor> {
        let i = self
            .layers
            .iter()
            .position(|&l| l == layer)
            .ok_or(Error::UnknownLayer(layer))?;
        let (fc1, fc2) = &self.mlps[i];
        let dims = features.dims();
        if dims.len() != 2 || dims[1] != fc1.in_dim() {
            return Err(Error::Shape {
                expected: format!("(S, {})", fc1.in_dim()),
                got: format!("{dims:?}"),
            });
        }
        let h = fc2.forward(&fc1.forward(features)?.relu()?)?;
        l2_normalize(&h)
    }

    /// Embeds every layer of a patch set, in the set's layer order.
    pub fn project(&self, features: &PatchFeatureSet) -> Result<Vec<Tensor>> {
        features
            .layers
            .iter()
            .map(|lp| self.project_layer(lp.layer, &lp.features))
            .collect()
    }
}

/// Row-wise `v / sqrt(|v|^2 + eps^2)`; zero rows map to zero.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + NORM_EPS * NORM_EPS)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}
