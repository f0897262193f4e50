use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{conv_out, instance_norm, leaky_relu, Conv2d, Padding};
use crate::params::ParamBuilder;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub ndf: usize,
    /// Number of stride-2 layers.
    pub n_layers: usize,
    /// Terminate the score path with a sigmoid (required by the log-form loss).
    pub sigmoid: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            ndf: 64,
            n_layers: 3,
            sigmoid: false,
        }
    }
}

impl DiscriminatorConfig {
    /// `(kernel, stride, padding)` of every convolution, in order.
    fn geometry(&self) -> Vec<(usize, usize, usize)> {
        let mut g = vec![(4, 2, 1); self.n_layers];
        g.push((4, 1, 1));
        g.push((4, 1, 1));
        g
    }

    /// Score-map extent for an input of `size`, `None` if the input is too small.
    pub fn output_size(&self, size: usize) -> Option<usize> {
        self.geometry()
            .into_iter()
            .try_fold(size, |s, (k, st, p)| conv_out(s, k, st, p).filter(|&o| o > 0))
    }

    /// Input window covered by a single score.
    pub fn receptive_field(&self) -> usize {
        self.geometry()
            .into_iter()
            .rev()
            .fold(1, |rf, (k, s, _)| (rf - 1) * s + k)
    }
}

/// PatchGAN: a fully convolutional stack emitting one score per overlapping patch.
#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    convs: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new(pb: &mut ParamBuilder, name: &str, config: &DiscriminatorConfig) -> Result<Self> {
        let mut convs = Vec::new();
        let mut in_ch = config.in_channels;
        let mut out_ch = config.ndf;
        for (i, (k, s, p)) in config.geometry().into_iter().enumerate() {
            let last = i == config.n_layers + 1;
            if last {
                out_ch = 1;
            } else if i > 0 {
                out_ch = config.ndf * (1 << i.min(3));
            }
            convs.push(Conv2d::new(pb, &format!("{name}.conv{i}"), in_ch, out_ch, k, s, Padding::Zero(p))?);
            in_ch = out_ch;
        }
        Ok(Self {
            config: config.clone(),
            convs,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// `(B, 3, H, W) -> (B, 1, H', W')` score map.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != self.config.in_channels || self.config.output_size(dims[2].min(dims[3])).is_none() {
            return Err(Error::Shape {
                expected: format!("(B, {}, H, W) large enough for a patch map", self.config.in_channels),
                got: format!("{dims:?}"),
            });
        }
        let n = self.convs.len();
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i + 1 < n {
                if i > 0 {
                    h = instance_norm(&h)?;
                }
                h = leaky_relu(&h, 0.2)?;
            }
        }
        if self.config.sigmoid {
            h = (h.neg()?.exp()? + 1.0)?.recip()?;
        }
        Ok(h)
    }
}
