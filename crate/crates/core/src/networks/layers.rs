use candle_core::{Tensor, D};

use crate::params::{ParamBuilder, INIT_STD};
use crate::Result;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero(usize),
    Reflect(usize),
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: Padding,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        Ok(Self {
            weight: pb.normal(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], INIT_STD)?,
            bias: pb.zeros(&format!("{name}.bias"), &[out_ch])?,
            stride,
            padding,
        })
    }

    /// Wraps existing (frozen) tensors.
    pub fn from_tensors(weight: Tensor, bias: Tensor, stride: usize, padding: Padding) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (x, pad) = match self.padding {
            Padding::Zero(p) => (x.clone(), p),
            Padding::Reflect(p) => (reflect_pad(x, p)?, 0),
        };
        let y = x.conv2d(&self.weight, pad, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Stride-2 transposed convolution that doubles the spatial extent.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
}

impl ConvTranspose2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.normal(&format!("{name}.weight"), &[in_ch, out_ch, 3, 3], INIT_STD)?,
            bias: pb.zeros(&format!("{name}.bias"), &[out_ch])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // kernel 3, padding 1, output padding 1, stride 2
        let y = x.conv_transpose2d(&self.weight, 1, 1, 2, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.normal(&format!("{name}.weight"), &[out_dim, in_dim], INIT_STD)?,
            bias: pb.zeros(&format!("{name}.bias"), &[out_dim])?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    /// `(N, in) -> (N, out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Per-sample, per-channel normalization over the spatial dimensions, no affine.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let out = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
    Ok(out.reshape((b, c, h, w))?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Mirror padding without repeating the edge, on both spatial axes.
pub fn reflect_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    let x = x.index_select(&reflect_indices(h, pad, x.device())?, 2)?;
    Ok(x.index_select(&reflect_indices(w, pad, x.device())?, 3)?)
}

fn reflect_indices(n: usize, pad: usize, device: &candle_core::Device) -> Result<Tensor> {
    let period = 2 * (n.max(2) - 1);
    let idx: Vec<u32> = (0..n + 2 * pad)
        .map(|i| {
            if n == 1 {
                return 0;
            }
            let j = (i as i64 - pad as i64).rem_euclid(period as i64) as usize;
            (if j < n { j } else { period - j }) as u32
        })
        .collect();
    Ok(Tensor::new(idx, device)?)
}

/// Spatial size after a convolution.
/// 2x2 max pooling with stride 2 over even spatial sizes, built from a
/// reshape and two reductions so its gradient routes to the argmax only.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(crate::Error::Shape {
            expected: "even height and width".into(),
            got: format!("{h}x{w}"),
        });
    }
    Ok(x.reshape((b, c, h / 2, 2, w / 2, 2))?.max(5)?.max(3)?)
}

pub fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (size + 2 * padding).checked_sub(kernel).map(|s| s / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn max_pool_picks_block_maxima_and_routes_gradient() {
        let v = candle_core::Var::from_vec((0..16).map(|i| ((i * 7) % 16) as f64).collect::<Vec<_>>(), (1, 1, 4, 4), &Device::Cpu).unwrap();
        let y = max_pool2x2(v.as_tensor()).unwrap();
        let got: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        let x: Vec<f64> = v.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let mut want = vec![f64::MIN; 4];
        for (i, &val) in x.iter().enumerate() {
            let (r, c) = (i / 4, i % 4);
            let k = (r / 2) * 2 + c / 2;
            want[k] = want[k].max(val);
        }
        assert_eq!(got, want);
        let g = y.sum_all().unwrap().backward().unwrap();
        let g: Vec<f64> = g.get(&v).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let routed: Vec<f64> = x.iter().map(|val| if want.contains(val) { 1.0 } else { 0.0 }).collect();
        assert_eq!(g, routed);
    }

    #[test]
    fn reflect_pad_mirrors_without_edge() {
        let x = Tensor::arange(0f64, 4., &Device::Cpu).unwrap().reshape((1, 1, 1, 4)).unwrap();
        let x = x.broadcast_as((1, 1, 2, 4)).unwrap().contiguous().unwrap();
        let y = reflect_pad(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 6, 8]);
        let row: Vec<f64> = y.get(0).unwrap().get(0).unwrap().get(0).unwrap().to_vec1().unwrap();
        assert_eq!(row, vec![2., 1., 0., 1., 2., 3., 2., 1.]);
    }

    #[test]
    fn instance_norm_zero_mean_unit_variance() {
        let x = Tensor::randn(3f64, 2., (1, 2, 5, 5), &Device::Cpu).unwrap();
        let y = instance_norm(&x).unwrap().flatten_from(2).unwrap();
        let m = y.mean(2).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        let v = y.sqr().unwrap().mean(2).unwrap().to_vec2::<f64>().unwrap();
        assert!(m < 1e-12);
        assert!((v[0][0] - 1.0).abs() < 1e-3);
        let _ = DType::F64;
    }

    #[test]
    fn conv_output_arithmetic() {
        assert_eq!(conv_out(256, 4, 2, 1), Some(128));
        assert_eq!(conv_out(32, 4, 1, 1), Some(31));
        assert_eq!(conv_out(1, 4, 1, 1), None);
    }
}
