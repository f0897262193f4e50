use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{instance_norm, Conv2d, ConvTranspose2d, Padding};
use super::{FrameMap, FramePredictor};
use crate::params::ParamBuilder;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Width of the first convolution.
    pub ngf: usize,
    pub n_downsampling: usize,
    pub n_blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            out_channels: 3,
            ngf: 64,
            n_downsampling: 2,
            n_blocks: 9,
        }
    }
}

impl GeneratorConfig {
    /// Number of encoder stages addressable as patch layers: the raw input,
    /// the stem, each downsampling block and each residual block.
    pub fn num_stages(&self) -> usize {
        2 + self.n_downsampling + self.n_blocks
    }

    pub fn stage_channels(&self, stage: usize) -> Option<usize> {
        let bottleneck = self.ngf << self.n_downsampling;
        match stage {
            0 => Some(self.in_channels),
            s if s <= 1 + self.n_downsampling => Some(self.ngf << (s - 1)),
            s if s < self.num_stages() => Some(bottleneck),
            _ => None,
        }
    }

    /// Spatial extent `(H, W)` of a stage for a given input size.
    pub fn stage_extent(&self, stage: usize, height: usize, width: usize) -> Option<(usize, usize)> {
        if stage >= self.num_stages() {
            return None;
        }
        let downs = stage.saturating_sub(1).min(self.n_downsampling);
        let (mut h, mut w) = (height, width);
        for _ in 0..downs {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        Some((h, w))
    }

    /// The first five stages, or all of them for shallower encoders.
    pub fn default_patch_layers(&self) -> Vec<usize> {
        (0..self.num_stages().min(5)).collect()
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = instance_norm(&self.conv1.forward(x)?)?.relu()?;
        let h = instance_norm(&self.conv2.forward(&h)?)?;
        Ok((x + h)?)
    }
}

/// ResNet encoder-decoder: 7x7 stem, strided downsampling, residual blocks,
/// transposed-convolution upsampling and a tanh-terminated 7x7 output layer.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    stem: Conv2d,
    downs: Vec<Conv2d>,
    blocks: Vec<ResBlock>,
    ups: Vec<ConvTranspose2d>,
    head: Conv2d,
}

impl Generator {
    pub fn new(pb: &mut ParamBuilder, name: &str, config: &GeneratorConfig) -> Result<Self> {
        let ngf = config.ngf;
        let stem = Conv2d::new(pb, &format!("{name}.stem"), config.in_channels, ngf, 7, 1, Padding::Reflect(3))?;
        let mut downs = Vec::new();
        for i in 0..config.n_downsampling {
            let c = ngf << i;
            downs.push(Conv2d::new(pb, &format!("{name}.down{i}"), c, 2 * c, 3, 2, Padding::Zero(1))?);
        }
        let width = ngf << config.n_downsampling;
        let mut blocks = Vec::new();
        for i in 0..config.n_blocks {
            blocks.push(ResBlock {
                conv1: Conv2d::new(pb, &format!("{name}.block{i}.conv1"), width, width, 3, 1, Padding::Reflect(1))?,
                conv2: Conv2d::new(pb, &format!("{name}.block{i}.conv2"), width, width, 3, 1, Padding::Reflect(1))?,
            });
        }
        let mut ups = Vec::new();
        for i in 0..config.n_downsampling {
            let c = ngf << (config.n_downsampling - i);
            ups.push(ConvTranspose2d::new(pb, &format!("{name}.up{i}"), c, c / 2)?);
        }
        let head = Conv2d::new(pb, &format!("{name}.head"), ngf, config.out_channels, 7, 1, Padding::Reflect(3))?;
        Ok(Self {
            config: config.clone(),
            stem,
            downs,
            blocks,
            ups,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        let ok = dims.len() == 4
            && dims[1] == self.config.in_channels
            && dims[2] % (1 << self.config.n_downsampling) == 0
            && dims[3] % (1 << self.config.n_downsampling) == 0
            && dims[2] > 3
            && dims[3] > 3;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape {
                expected: format!(
                    "(B, {}, H, W) with H, W divisible by {}",
                    self.config.in_channels,
                    1 << self.config.n_downsampling
                ),
                got: format!("{dims:?}"),
            })
        }
    }

    /// Runs the encoder, returning the feature maps of the requested stages
    /// (in the requested order) and the final encoder output.
    pub fn encode(&self, x: &Tensor, stages: &[usize]) -> Result<(Vec<Tensor>, Tensor)> {
        self.check_input(x)?;
        if let Some(&bad) = stages.iter().find(|&&s| s >= self.config.num_stages()) {
            return Err(Error::UnknownLayer(bad));
        }
        let mut taps: Vec<Option<Tensor>> = vec![None; stages.len()];
        let mut record = |stage: usize, t: &Tensor| {
            for (slot, &s) in taps.iter_mut().zip(stages) {
                if s == stage {
                    *slot = Some(t.clone());
                }
            }
        };
        record(0, x);
        let mut h = instance_norm(&self.stem.forward(x)?)?.relu()?;
        record(1, &h);
        let mut stage = 2;
        for down in &self.downs {
            h = instance_norm(&down.forward(&h)?)?.relu()?;
            record(stage, &h);
            stage += 1;
        }
        for block in &self.blocks {
            h = block.forward(&h)?;
            record(stage, &h);
            stage += 1;
        }
        Ok((taps.into_iter().map(|t| t.expect("stage recorded")).collect(), h))
    }

    fn decode(&self, h: &Tensor) -> Result<Tensor> {
        let mut h = h.clone();
        for up in &self.ups {
            h = instance_norm(&up.forward(&h)?)?.relu()?;
        }
        Ok(self.head.forward(&h)?.tanh()?)
    }

    /// Full translation, also returning the encoder taps for `stages`.
    pub fn forward_with_taps(&self, x: &Tensor, stages: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
        let (taps, h) = self.encode(x, stages)?;
        Ok((self.decode(&h)?, taps))
    }
}

impl FrameMap for Generator {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h) = self.encode(x, &[])?;
        self.decode(&h)
    }
}

/// Forecasts the next frame from the two preceding ones, concatenated on channels.
#[derive(Debug, Clone)]
pub struct Predictor {
    net: Generator,
}

impl Predictor {
    pub fn new(pb: &mut ParamBuilder, name: &str, config: &GeneratorConfig) -> Result<Self> {
        let mut config = config.clone();
        config.in_channels = 6;
        config.out_channels = 3;
        Ok(Self {
            net: Generator::new(pb, name, &config)?,
        })
    }
}

impl FramePredictor for Predictor {
    fn predict(&self, first: &Tensor, second: &Tensor) -> Result<Tensor> {
        if first.dims() != second.dims() {
            return Err(Error::Shape {
                expected: format!("{:?}", first.dims()),
                got: format!("{:?}", second.dims()),
            });
        }
        self.net.forward(&Tensor::cat(&[first, second], 1)?)
    }
}
