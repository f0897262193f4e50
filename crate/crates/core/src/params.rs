//! Named parameter storage with seeded initialization.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Trainable parameters keyed by `network.layer.path`, iterated in key order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, var: Var) {
        let previous = self.vars.insert(name.clone(), var);
        assert!(previous.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Parameters whose name starts with any of `prefixes`.
    pub fn with_prefixes<'a>(
        &'a self,
        prefixes: &'a [&'a str],
    ) -> impl Iterator<Item = (&'a String, &'a Var)> + 'a {
        self.vars
            .iter()
            .filter(move |(n, _)| prefixes.iter().any(|p| has_prefix(n, p)))
    }

    /// Order-sensitive hash of the raw parameter bits under `prefixes`
    /// (all parameters when empty).
    pub fn fingerprint(&self, prefixes: &[&str]) -> Result<u64> {
        let mut h = DefaultHasher::new();
        for (name, var) in &self.vars {
            if prefixes.is_empty() || prefixes.iter().any(|p| has_prefix(name, p)) {
                name.hash(&mut h);
                hash_tensor(var.as_tensor(), &mut h)?;
            }
        }
        Ok(h.finish())
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter from `values`. Names and shapes must match exactly.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() || t.dtype() != var.dtype() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: stored {:?}/{:?}, model {:?}/{:?}",
                    t.dims(),
                    t.dtype(),
                    var.dims(),
                    var.dtype()
                )));
            }
            var.set(t)?;
        }
        Ok(())
    }
}

fn has_prefix(name: &str, prefix: &str) -> bool {
    name == prefix || (name.starts_with(prefix) && name[prefix.len()..].starts_with('.'))
}

pub(crate) fn hash_tensor(t: &Tensor, h: &mut impl Hasher) -> Result<()> {
    t.dims().hash(h);
    for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
        v.to_bits().hash(h);
    }
    Ok(())
}

/// Creates parameters in a store, drawing initial values from a seeded stream.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub dtype: DType,
    pub device: Device,
}

impl ParamBuilder<'_> {
    /// Zero-mean Gaussian with `std`.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let t = gaussian(self.rng, shape, std, self.dtype, &self.device)?;
        self.register(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::zeros(shape, self.dtype, &self.device)?;
        self.register(name, t)
    }

    fn register(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.store.insert(name.to_string(), var);
        Ok(out)
    }
}

pub(crate) fn gaussian(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    std: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let values: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// Parses the dtype names used in configs and checkpoints.
pub fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Config(format!("unsupported dtype `{other}` (use f32 or f64)"))),
    }
}

pub fn dtype_name(dtype: DType) -> &'static str {
    match dtype {
        DType::F64 => "f64",
        _ => "f32",
    }
}
