#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use i2v_core::data::FrameTriplet;
use i2v_core::losses::LossWeights;
use i2v_core::networks::{FrameMap, FramePredictor, ModelConfig};
use i2v_core::trainer::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CPU: Device = Device::Cpu;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(data, shape, &CPU).unwrap()
}

pub fn frame(rng: &mut impl Rng, size: usize) -> Tensor {
    uniform(rng, &[1, 3, size, size], -0.9, 0.9)
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Three 3x3 convolutions with tanh in between.
pub struct StubNet {
    pub layers: Vec<(Var, Var)>,
}

impl StubNet {
    pub fn new(rng: &mut impl Rng, in_ch: usize, hidden: usize, out_ch: usize) -> Self {
        let chans = [in_ch, hidden, hidden, out_ch];
        let layers = chans
            .windows(2)
            .map(|w| {
                let std = 1.0 / ((w[0] * 9) as f64).sqrt();
                (
                    Var::from_tensor(&uniform(rng, &[w[1], w[0], 3, 3], -std, std)).unwrap(),
                    Var::from_tensor(&uniform(rng, &[w[1]], -0.1, 0.1)).unwrap(),
                )
            })
            .collect();
        Self { layers }
    }

    pub fn vars(&self) -> Vec<&Var> {
        self.layers.iter().flat_map(|(w, b)| [w, b]).collect()
    }
}

impl FrameMap for StubNet {
    fn forward(&self, x: &Tensor) -> i2v_core::Result<Tensor> {
        let mut h = x.clone();
        for (w, b) in &self.layers {
            h = h
                .conv2d(w.as_tensor(), 1, 1, 1, 1)?
                .broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?
                .tanh()?;
        }
        Ok(h)
    }
}

impl FramePredictor for StubNet {
    fn predict(&self, first: &Tensor, second: &Tensor) -> i2v_core::Result<Tensor> {
        self.forward(&Tensor::cat(&[first, second], 1)?)
    }
}

/// `a * x + b`, exactly invertible in exact arithmetic.
pub struct Affine {
    pub a: f64,
    pub b: f64,
}

impl FrameMap for Affine {
    fn forward(&self, x: &Tensor) -> i2v_core::Result<Tensor> {
        Ok(((x * self.a)? + self.b)?)
    }
}

/// Linear extrapolation `2 * second - first`, optionally scaled.
pub struct Extrapolate {
    pub gain: f64,
}

impl FramePredictor for Extrapolate {
    fn predict(&self, first: &Tensor, second: &Tensor) -> i2v_core::Result<Tensor> {
        Ok((((second * 2.0)? - first)? * self.gain)?)
    }
}

fn perturbed(var: &Var, index: usize, delta: f64) -> Tensor {
    let shape = var.as_tensor().dims().to_vec();
    let mut data = to_vec(var.as_tensor());
    data[index] += delta;
    Tensor::from_vec(data, shape, &CPU).unwrap().to_dtype(var.dtype()).unwrap()
}

/// Central-difference check of `loss` w.r.t. `count` random coordinates of
/// each variable. Returns the worst relative error seen.
pub fn fd_check(
    vars: &[&Var],
    count: usize,
    rng: &mut impl Rng,
    loss: &dyn Fn() -> i2v_core::Result<Tensor>,
) -> f64 {
    const H: f64 = 1e-6;
    let l = loss().unwrap();
    // central differences cannot resolve slopes below roundoff of the loss itself
    let abs_floor = 1e-8 * scalar(&l).abs().max(1.0);
    let grads = l.backward().unwrap();
    let mut worst: f64 = 0.0;
    for var in vars {
        let analytic = grads.get(var).map(to_vec).unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let original = var.as_tensor().copy().unwrap();
        for _ in 0..count {
            let i = rng.random_range(0..var.elem_count());
            var.set(&perturbed(var, i, H)).unwrap();
            let up = scalar(&loss().unwrap());
            var.set(&perturbed(var, i, -2.0 * H)).unwrap();
            let down = scalar(&loss().unwrap());
            var.set(&original).unwrap();
            let numeric = (up - down) / (2.0 * H);
            let diff = (numeric - analytic[i]).abs();
            let rel = if diff <= abs_floor {
                0.0
            } else {
                diff / numeric.abs().max(analytic[i].abs())
            };
            worst = worst.max(rel);
        }
    }
    worst
}

/// Adds small noise to every parameter so no ReLU sits exactly on its kink
/// (zero-initialised biases otherwise put them there).
pub fn jitter(store: &i2v_core::params::ParamStore, rng: &mut impl Rng, scale: f64) {
    for (_, var) in store.iter() {
        let noise = uniform(rng, var.as_tensor().dims(), -scale, scale).to_dtype(var.dtype()).unwrap();
        var.set(&(var.as_tensor() + noise).unwrap()).unwrap();
    }
}

pub fn tiny_train_config(size: usize, seed: u64) -> TrainConfig {
    let mut model = ModelConfig::tiny(size);
    model.dtype = "f64".into();
    TrainConfig {
        model,
        weights: LossWeights {
            patches: 16,
            ..LossWeights::default()
        },
        learning_rate: 2e-3,
        total_iterations: 100,
        checkpoint_interval: 50,
        seed,
        ..TrainConfig::default()
    }
}

pub fn random_triplet(rng: &mut impl Rng, size: usize) -> FrameTriplet {
    let frames = [0, 1, 2].map(|_| {
        i2v_core::data::FrameTensor::new(uniform(rng, &[3, size, size], -0.9, 0.9)).unwrap()
    });
    FrameTriplet {
        frames,
        source_clip: "random".into(),
        start_index: 0,
    }
}
