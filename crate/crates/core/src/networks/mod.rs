//! Generators, predictors, discriminators, projection heads and the frozen
//! perceptual extractor.

mod discriminator;
mod generator;
mod heads;
pub mod layers;
mod perceptual;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig, Predictor};
pub use heads::{l2_normalize, HeadConfig, ProjectionHeads};
pub use perceptual::{PerceptualConfig, PerceptualExtractor};

use crate::data::{Domain, FrameTensor, FRAME_SIZE};
use crate::params::{parse_dtype, ParamBuilder, ParamStore};
use crate::{Error, Result};

/// Frame-to-frame network operating on `(B, 3, H, W)` tensors.
pub trait FrameMap {
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
}

/// Forecasts a frame from the two frames before it.
pub trait FramePredictor {
    fn predict(&self, first: &Tensor, second: &Tensor) -> Result<Tensor>;
}

/// Raw encoder features of one layer at a set of spatial positions.
#[derive(Debug, Clone)]
pub struct LayerPatches {
    pub layer: usize,
    /// Row-major indices into the layer's `H_l * W_l` grid.
    pub locations: Vec<usize>,
    /// `(S, C_l)`.
    pub features: Tensor,
}

#[derive(Debug, Clone)]
pub struct PatchFeatureSet {
    pub layers: Vec<LayerPatches>,
}

impl PatchFeatureSet {
    pub fn column_count(&self) -> usize {
        self.layers.iter().map(|l| l.locations.len()).sum()
    }
}

/// Picks `(S, C)` columns out of `(1, C, H, W)` feature maps.
pub fn gather_patches(maps: &[Tensor], layers: &[usize], locations: &[Vec<usize>]) -> Result<PatchFeatureSet> {
    if maps.len() != layers.len() || locations.len() != layers.len() {
        return Err(Error::Shape {
            expected: format!("{} location sets", layers.len()),
            got: format!("{}", locations.len()),
        });
    }
    let mut out = Vec::with_capacity(layers.len());
    for ((map, &layer), locs) in maps.iter().zip(layers).zip(locations) {
        let (_, c, h, w) = map.dims4()?;
        if let Some(&bad) = locs.iter().find(|&&s| s >= h * w) {
            return Err(Error::LocationOutOfRange {
                layer,
                location: bad,
                extent: h * w,
            });
        }
        let idx = Tensor::new(locs.iter().map(|&s| s as u32).collect::<Vec<_>>(), map.device())?;
        let cols = map.get(0)?.reshape((c, h * w))?.index_select(&idx, 1)?;
        out.push(LayerPatches {
            layer,
            locations: locs.clone(),
            features: cols.t()?.contiguous()?,
        });
    }
    Ok(PatchFeatureSet { layers: out })
}

/// Raw patch features of `frame` at the given layers and positions.
pub fn encode_patches(
    generator: &Generator,
    frame: &FrameTensor,
    layers: &[usize],
    locations: &[Vec<usize>],
) -> Result<PatchFeatureSet> {
    let (maps, _) = generator.encode(&frame.batched()?, layers)?;
    gather_patches(&maps, layers, locations)
}

/// Without-replacement sample of `min(count, extent)` positions per layer.
pub fn sample_locations<R: Rng + ?Sized>(rng: &mut R, extents: &[usize], count: usize) -> Vec<Vec<usize>> {
    extents
        .iter()
        .map(|&n| rand::seq::index::sample(rng, n, count.min(n)).into_vec())
        .collect()
}

/// A generator's encoder paired with the projection heads of its direction.
#[derive(Clone, Copy)]
pub struct PatchEmbedder<'a> {
    pub encoder: &'a Generator,
    pub heads: &'a ProjectionHeads,
}

impl PatchEmbedder<'_> {
    pub fn layers(&self) -> &[usize] {
        self.heads.layers()
    }

    /// Encoder feature maps at every head layer.
    pub fn feature_maps(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.encoder.encode(x, self.layers())?.0)
    }

    /// `(S_l, K)` unit embeddings per layer from precomputed maps.
    pub fn embed_maps(&self, maps: &[Tensor], locations: &[Vec<usize>]) -> Result<Vec<Tensor>> {
        self.heads.project(&gather_patches(maps, self.layers(), locations)?)
    }

    pub fn embed(&self, x: &Tensor, locations: &[Vec<usize>]) -> Result<Vec<Tensor>> {
        self.embed_maps(&self.feature_maps(x)?, locations)
    }

    /// Number of spatial positions of each head layer for `height`x`width` input.
    pub fn extents(&self, height: usize, width: usize) -> Vec<usize> {
        self.layers()
            .iter()
            .map(|&l| {
                let (h, w) = self.encoder.config().stage_extent(l, height, width).unwrap_or((0, 0));
                h * w
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    /// `f32` or `f64`.
    pub dtype: String,
    pub generator: GeneratorConfig,
    /// Input/output channels are forced to 6/3.
    pub predictor: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub head: HeadConfig,
    /// Generator encoder stages used for patch embeddings.
    pub patch_layers: Vec<usize>,
    pub perceptual: PerceptualConfig,
    pub perceptual_layers: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let generator = GeneratorConfig::default();
        Self {
            image_size: FRAME_SIZE,
            dtype: "f32".into(),
            patch_layers: generator.default_patch_layers(),
            predictor: generator.clone(),
            generator,
            discriminator: DiscriminatorConfig::default(),
            head: HeadConfig::default(),
            perceptual: PerceptualConfig::default(),
            perceptual_layers: vec![0, 1, 2, 3],
        }
    }
}

impl ModelConfig {
    /// A small model for tests and desk-scale experiments.
    pub fn tiny(image_size: usize) -> Self {
        let generator = GeneratorConfig {
            in_channels: 3,
            out_channels: 3,
            ngf: 4,
            n_downsampling: 1,
            n_blocks: 1,
        };
        Self {
            image_size,
            dtype: "f64".into(),
            patch_layers: generator.default_patch_layers(),
            predictor: generator.clone(),
            generator,
            discriminator: DiscriminatorConfig {
                in_channels: 3,
                ndf: 4,
                n_layers: 1,
                sigmoid: false,
            },
            head: HeadConfig {
                hidden: 16,
                embed_dim: 8,
            },
            perceptual: PerceptualConfig {
                widths: vec![4, 8],
                convs_per_block: vec![1, 1],
                seed: 7,
                weights: None,
            },
            perceptual_layers: vec![0, 1],
        }
    }

    pub fn dtype(&self) -> Result<DType> {
        parse_dtype(&self.dtype)
    }

    pub fn validate(&self) -> Result<()> {
        self.dtype()?;
        let stride = 1usize << self.generator.n_downsampling.max(self.predictor.n_downsampling);
        if self.image_size < 8 || self.image_size % stride != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be at least 8 and divisible by {stride}",
                self.image_size
            )));
        }
        if self.discriminator.output_size(self.image_size).is_none() {
            return Err(Error::Config(format!(
                "image_size {} is too small for a {}-layer patch discriminator",
                self.image_size, self.discriminator.n_layers
            )));
        }
        if let Some(&bad) = self.patch_layers.iter().find(|&&l| l >= self.generator.num_stages()) {
            return Err(Error::UnknownLayer(bad));
        }
        if let Some(&bad) = self.perceptual_layers.iter().find(|&&l| l >= self.perceptual.num_layers()) {
            return Err(Error::UnknownLayer(bad));
        }
        Ok(())
    }
}

/// Parameter-name prefixes of the networks updated by the generator step.
pub const GENERATOR_GROUP: &[&str] = &["g_x", "g_y", "p_x", "p_y", "heads_x", "heads_y"];
/// Parameter-name prefixes of the networks updated by the discriminator step.
pub const DISCRIMINATOR_GROUP: &[&str] = &["d_x", "d_y"];

/// The six trainable networks, the projection heads of both directions and
/// the frozen perceptual extractor.
///
/// `g_y` maps X to Y and `g_x` maps Y to X. `heads_x` embeds patches coming
/// out of `g_y`'s encoder, i.e. the X to Y direction; `heads_y` pairs with
/// `g_x`.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub g_x: Generator,
    pub g_y: Generator,
    pub p_x: Predictor,
    pub p_y: Predictor,
    pub d_x: Discriminator,
    pub d_y: Discriminator,
    pub heads_x: ProjectionHeads,
    pub heads_y: ProjectionHeads,
    pub perceptual: PerceptualExtractor,
}

impl ModelBundle {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let dtype = config.dtype()?;
        let device = Device::Cpu;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder {
            store: &mut store,
            rng: &mut rng,
            dtype,
            device: device.clone(),
        };
        let g_x = Generator::new(&mut pb, "g_x", &config.generator)?;
        let g_y = Generator::new(&mut pb, "g_y", &config.generator)?;
        let p_x = Predictor::new(&mut pb, "p_x", &config.predictor)?;
        let p_y = Predictor::new(&mut pb, "p_y", &config.predictor)?;
        let d_x = Discriminator::new(&mut pb, "d_x", &config.discriminator)?;
        let d_y = Discriminator::new(&mut pb, "d_y", &config.discriminator)?;
        let head_layers: Vec<(usize, usize)> = config
            .patch_layers
            .iter()
            .map(|&l| (l, config.generator.stage_channels(l).expect("validated")))
            .collect();
        let heads_x = ProjectionHeads::new(&mut pb, "heads_x", &head_layers, &config.head)?;
        let heads_y = ProjectionHeads::new(&mut pb, "heads_y", &head_layers, &config.head)?;
        let perceptual = PerceptualExtractor::new(&config.perceptual, dtype, &device)?;
        Ok(Self {
            config: config.clone(),
            store,
            g_x,
            g_y,
            p_x,
            p_y,
            d_x,
            d_y,
            heads_x,
            heads_y,
            perceptual,
        })
    }

    pub fn dtype(&self) -> DType {
        self.config.dtype().expect("validated")
    }

    /// Generator translating frames *out of* `source`.
    pub fn translator(&self, source: Domain) -> &Generator {
        match source {
            Domain::X => &self.g_y,
            Domain::Y => &self.g_x,
        }
    }

    /// Encoder and heads used when `source` frames are translated.
    pub fn embedder(&self, source: Domain) -> PatchEmbedder<'_> {
        match source {
            Domain::X => PatchEmbedder {
                encoder: &self.g_y,
                heads: &self.heads_x,
            },
            Domain::Y => PatchEmbedder {
                encoder: &self.g_x,
                heads: &self.heads_y,
            },
        }
    }

    pub fn predictor(&self, domain: Domain) -> &Predictor {
        match domain {
            Domain::X => &self.p_x,
            Domain::Y => &self.p_y,
        }
    }

    pub fn discriminator(&self, domain: Domain) -> &Discriminator {
        match domain {
            Domain::X => &self.d_x,
            Domain::Y => &self.d_y,
        }
    }
}

/// Translates one frame.
pub fn generate(generator: &Generator, x: &FrameTensor) -> Result<FrameTensor> {
    let y = generator.forward(&x.batched()?)?;
    Ok(FrameTensor::from_network(y.squeeze(0)?))
}

/// Forecasts the frame following `f_t`, `f_t1`.
pub fn predict_next(predictor: &Predictor, f_t: &FrameTensor, f_t1: &FrameTensor) -> Result<FrameTensor> {
    let y = predictor.predict(&f_t.batched()?, &f_t1.batched()?)?;
    Ok(FrameTensor::from_network(y.squeeze(0)?))
}

/// `(H', W')` map of patch scores.
pub fn discriminate(discriminator: &Discriminator, f: &FrameTensor) -> Result<Tensor> {
    Ok(discriminator.forward(&f.batched()?)?.squeeze(0)?.squeeze(0)?)
}

/// `(C_l, H_l, W_l)` feature map of one published layer.
pub fn extract_perceptual(extractor: &PerceptualExtractor, f: &FrameTensor, layer: usize) -> Result<Tensor> {
    let mut maps = extractor.features(&f.batched()?, &[layer])?;
    Ok(maps.remove(0).squeeze(0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_frame(seed: u64, size: usize) -> FrameTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..3 * size * size).map(|_| rng.random_range(-1.0..=1.0)).collect();
        FrameTensor::new(Tensor::from_vec(v, (3, size, size), &Device::Cpu).unwrap()).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn generator_shape_range_determinism() {
        let bundle = ModelBundle::new(&ModelConfig::tiny(16), 1).unwrap();
        let x = random_frame(2, 16);
        let a = generate(&bundle.g_y, &x).unwrap();
        let b = generate(&bundle.g_y, &x).unwrap();
        assert_eq!(a.tensor().dims(), x.tensor().dims());
        assert_eq!(max_abs_diff(a.tensor(), b.tensor()), 0.0);
        assert!(a.tensor().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap() < 1.0);
    }

    #[test]
    fn generator_rejects_bad_shape() {
        let bundle = ModelBundle::new(&ModelConfig::tiny(16), 1).unwrap();
        let t = Tensor::zeros((1, 4, 16, 16), DType::F64, &Device::Cpu).unwrap();
        assert!(bundle.g_x.forward(&t).is_err());
        let odd = Tensor::zeros((1, 3, 15, 15), DType::F64, &Device::Cpu).unwrap();
        assert!(bundle.g_x.forward(&odd).is_err());
    }

    #[test]
    fn predictor_is_order_sensitive() {
        let mut config = ModelConfig::tiny(16);
        // wider init so the two orderings are clearly separated
        config.predictor.ngf = 8;
        let bundle = ModelBundle::new(&config, 3).unwrap();
        let (a, b) = (random_frame(4, 16), random_frame(5, 16));
        let ab = predict_next(&bundle.p_x, &a, &b).unwrap();
        let ba = predict_next(&bundle.p_x, &b, &a).unwrap();
        assert_eq!(ab.tensor().dims(), &[3, 16, 16]);
        assert!(max_abs_diff(ab.tensor(), ba.tensor()) > 0.0);
        let again = predict_next(&bundle.p_x, &a, &b).unwrap();
        assert_eq!(max_abs_diff(ab.tensor(), again.tensor()), 0.0);
    }

    #[test]
    fn discriminator_emits_patch_map_matching_arithmetic() {
        let config = ModelConfig::tiny(16);
        let bundle = ModelBundle::new(&config, 1).unwrap();
        let scores = discriminate(&bundle.d_x, &random_frame(6, 16)).unwrap();
        let side = config.discriminator.output_size(16).unwrap();
        assert_eq!(side, 6);
        assert_eq!(scores.dims(), &[side, side]);
    }

    #[test]
    fn patch_encoding_counts_and_channels() {
        let config = ModelConfig::tiny(16);
        let bundle = ModelBundle::new(&config, 1).unwrap();
        let x = random_frame(7, 16);
        let layers = config.patch_layers.clone();
        let locs: Vec<Vec<usize>> = layers.iter().map(|_| vec![0, 5, 17, 30]).collect();
        let set = encode_patches(&bundle.g_y, &x, &layers, &locs).unwrap();
        assert_eq!(set.column_count(), layers.len() * 4);
        for lp in &set.layers {
            assert_eq!(lp.features.dims()[1], config.generator.stage_channels(lp.layer).unwrap());
        }
        let again = encode_patches(&bundle.g_y, &x, &layers, &locs).unwrap();
        for (a, b) in set.layers.iter().zip(&again.layers) {
            assert_eq!(max_abs_diff(&a.features, &b.features), 0.0);
        }
        let far: Vec<Vec<usize>> = layers.iter().map(|_| vec![10_000]).collect();
        assert!(matches!(
            encode_patches(&bundle.g_y, &x, &layers, &far),
            Err(Error::LocationOutOfRange { .. })
        ));
    }

    #[test]
    fn projections_are_unit_length_and_zero_safe() {
        let config = ModelConfig::tiny(16);
        let bundle = ModelBundle::new(&config, 1).unwrap();
        let layer = config.patch_layers[2];
        let c = config.generator.stage_channels(layer).unwrap();
        let feats = Tensor::randn(0f64, 1., (20, c), &Device::Cpu).unwrap();
        let z = bundle.heads_x.project_layer(layer, &feats).unwrap();
        for n in z.sqr().unwrap().sum(1).unwrap().sqrt().unwrap().to_vec1::<f64>().unwrap() {
            assert!((n - 1.0).abs() < 1e-6);
        }
        let again = bundle.heads_x.project_layer(layer, &feats).unwrap();
        assert_eq!(max_abs_diff(&z, &again), 0.0);
        let zero = Tensor::zeros((1, 4), DType::F64, &Device::Cpu).unwrap();
        let nz = l2_normalize(&zero).unwrap().to_vec2::<f64>().unwrap();
        assert!(nz[0].iter().all(|v| *v == 0.0));
        assert!(bundle.heads_x.project_layer(layer, &Tensor::zeros((2, c + 1), DType::F64, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn perceptual_shapes_and_frozen() {
        let config = ModelConfig::tiny(16);
        let bundle = ModelBundle::new(&config, 1).unwrap();
        let before = bundle.perceptual.fingerprint().unwrap();
        let x = random_frame(8, 16);
        for _ in 0..1000 {
            for l in bundle.perceptual.layers() {
                let f = extract_perceptual(&bundle.perceptual, &x, l).unwrap();
                let (c, h, w) = config.perceptual.layer_shape(l, 16, 16).unwrap();
                assert_eq!(f.dims(), &[c, h, w]);
            }
        }
        assert_eq!(before, bundle.perceptual.fingerprint().unwrap());
        assert!(matches!(extract_perceptual(&bundle.perceptual, &x, 9), Err(Error::UnknownLayer(9))));
    }

    #[test]
    fn default_config_validates() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.patch_layers, vec![0, 1, 2, 3, 4]);
        assert_eq!(c.generator.stage_channels(4), Some(256));
        assert_eq!(c.generator.stage_extent(3, 256, 256), Some((64, 64)));
    }
}
