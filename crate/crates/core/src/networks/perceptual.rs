//! Frozen VGG-style feature extractor for the content and style losses.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hasher};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{max_pool2x2, Conv2d, Padding};
use crate::params::{gaussian, hash_tensor};
use crate::{Error, Result};

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptualConfig {
    /// Output channels of each block.
    pub widths: Vec<usize>,
    /// Number of 3x3 convolutions in each block.
    pub convs_per_block: Vec<usize>,
    /// Seed for the weights when no pretrained file is given.
    pub seed: u64,
    /// Optional safetensors file with `features.<i>.weight` / `.bias` keys.
    pub weights: Option<String>,
}

impl Default for PerceptualConfig {
    /// VGG-16 up to `relu4_3`.
    fn default() -> Self {
        Self {
            widths: vec![64, 128, 256, 512],
            convs_per_block: vec![2, 2, 3, 3],
            seed: 0x5eed,
            weights: None,
        }
    }
}

impl PerceptualConfig {
    pub fn num_layers(&self) -> usize {
        self.widths.len()
    }

    /// Published `(C, H, W)` of a tap for an `height`x`width` input.
    pub fn layer_shape(&self, layer: usize, height: usize, width: usize) -> Option<(usize, usize, usize)> {
        let c = *self.widths.get(layer)?;
        Some((c, height >> layer, width >> layer))
    }
}

/// The last ReLU of every block is a published layer. Parameters are plain
/// tensors, never variables, so backpropagation reaches the input only.
#[derive(Debug, Clone)]
pub struct PerceptualExtractor {
    config: PerceptualConfig,
    blocks: Vec<Vec<Conv2d>>,
    params: BTreeMap<String, Tensor>,
}

impl PerceptualExtractor {
    pub fn new(config: &PerceptualConfig, dtype: DType, device: &Device) -> Result<Self> {
        let loaded = match &config.weights {
            Some(path) => Some(load_weights(Path::new(path), dtype, device)?),
            None => None,
        };
        Self::build(config, loaded, dtype, device)
    }

    /// Rebuilds an extractor from previously exported [`params`](Self::params).
    pub fn from_params(config: &PerceptualConfig, params: BTreeMap<String, Tensor>, dtype: DType, device: &Device) -> Result<Self> {
        let params = params
            .into_iter()
            .map(|(k, v)| Ok((k, v.to_dtype(dtype)?)))
            .collect::<Result<_>>()?;
        Self::build(config, Some(params), dtype, device)
    }

    fn build(config: &PerceptualConfig, loaded: Option<BTreeMap<String, Tensor>>, dtype: DType, device: &Device) -> Result<Self> {
        if config.widths.len() != config.convs_per_block.len() || config.widths.is_empty() {
            return Err(Error::Config("perceptual widths and convs_per_block must be non-empty and equal length".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = BTreeMap::new();
        let mut blocks = Vec::new();
        let mut in_ch = 3;
        // torchvision numbering: conv and relu each take an index, pooling one per block
        let mut index = 0;
        for (&width, &n) in config.widths.iter().zip(&config.convs_per_block) {
            let mut convs = Vec::new();
            for _ in 0..n {
                let wname = format!("features.{index}.weight");
                let bname = format!("features.{index}.bias");
                let (w, b) = match &loaded {
                    Some(map) => (take(map, &wname, &[width, in_ch, 3, 3])?, take(map, &bname, &[width])?),
                    None => {
                        let std = (2.0 / (in_ch * 9) as f64).sqrt();
                        (
                            gaussian(&mut rng, &[width, in_ch, 3, 3], std, dtype, device)?,
                            Tensor::zeros(width, dtype, device)?,
                        )
                    }
                };
                params.insert(wname, w.clone());
                params.insert(bname, b.clone());
                convs.push(Conv2d::from_tensors(w, b, 1, Padding::Zero(1)));
                in_ch = width;
                index += 2;
            }
            blocks.push(convs);
            index += 1;
        }
        Ok(Self {
            config: config.clone(),
            blocks,
            params,
        })
    }

    pub fn config(&self) -> &PerceptualConfig {
        &self.config
    }

    pub fn layers(&self) -> Vec<usize> {
        (0..self.blocks.len()).collect()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn fingerprint(&self) -> Result<u64> {
        let mut h = DefaultHasher::new();
        for t in self.params.values() {
            hash_tensor(t, &mut h)?;
        }
        Ok(h.finish())
    }

    /// Feature maps `(B, C_l, H_l, W_l)` for each requested layer, in request order.
    pub fn features(&self, x: &Tensor, layers: &[usize]) -> Result<Vec<Tensor>> {
        if let Some(&bad) = layers.iter().find(|&&l| l >= self.blocks.len()) {
            return Err(Error::UnknownLayer(bad));
        }
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::Shape {
                expected: "(B, 3, H, W)".into(),
                got: format!("{dims:?}"),
            });
        }
        let deepest = match layers.iter().max() {
            Some(&d) => d,
            None => return Ok(Vec::new()),
        };
        let mut h = self.normalize_input(x)?;
        let mut taps: Vec<Option<Tensor>> = vec![None; layers.len()];
        for (b, convs) in self.blocks.iter().enumerate().take(deepest + 1) {
            if b > 0 {
                h = max_pool2x2(&h)?;
            }
            for conv in convs {
                h = conv.forward(&h)?.relu()?;
            }
            for (slot, &l) in taps.iter_mut().zip(layers) {
                if l == b {
                    *slot = Some(h.clone());
                }
            }
        }
        Ok(taps.into_iter().map(|t| t.expect("tap recorded")).collect())
    }

    /// Maps `[-1, 1]` frames to ImageNet-normalized input.
    fn normalize_input(&self, x: &Tensor) -> Result<Tensor> {
        let (dtype, device) = (x.dtype(), x.device());
        let mean = Tensor::new(&IMAGENET_MEAN, device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&IMAGENET_STD, device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        let unit = ((x + 1.0)? * 0.5)?;
        Ok(unit.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }
}

fn load_weights(path: &Path, dtype: DType, device: &Device) -> Result<BTreeMap<String, Tensor>> {
    let map = candle_core::safetensors::load(path, device)?;
    map.into_iter()
        .map(|(k, v)| Ok((k, v.to_dtype(dtype)?)))
        .collect()
}

fn take(map: &BTreeMap<String, Tensor>, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = map
        .get(name)
        .ok_or_else(|| Error::Config(format!("perceptual weights lack `{name}`")))?;
    if t.dims() != shape {
        return Err(Error::Shape {
            expected: format!("{name} {shape:?}"),
            got: format!("{:?}", t.dims()),
        });
    }
    Ok(t.clone())
}
