//! Small differentiable building blocks on top of candle tensors.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Seeded source of initial weights.
pub struct Initializer {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl Initializer {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    /// Zero-mean Gaussian with standard deviation `gain / sqrt(fan_in)`.
    pub fn gaussian(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> Result<Var> {
        let std = gain / (fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<Var> {
        Ok(Var::zeros(shape, self.dtype, &self.device)?)
    }
}

/// Collects named parameters in a fixed order.
pub trait Parameters {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Var)>);

    fn named_vars(&self, prefix: &str) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut out);
        out
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(init: &mut Initializer, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        Ok(Conv2d {
            weight: init.gaussian(&[c_out, c_in, kernel, kernel], fan_in, 2f64.sqrt())?,
            bias: Some(init.zeros(&[c_out])?),
            stride,
            padding: kernel / 2,
        })
    }

    /// For a conv feeding an instance norm, which would cancel any bias.
    pub fn without_bias(init: &mut Initializer, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        Ok(Conv2d {
            bias: None,
            ..Self::new(init, c_in, c_out, kernel, stride)?
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = super::conv::conv2d(x, self.weight.as_tensor(), self.stride, self.padding)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Parameters for Conv2d {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(init: &mut Initializer, d_in: usize, d_out: usize, gain: f64) -> Result<Self> {
        Ok(Linear {
            weight: init.gaussian(&[d_out, d_in], d_in, gain)?,
            bias: init.zeros(&[d_out])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    let pos = (x.relu()? * (1.0 - LEAKY_SLOPE))?;
    Ok((pos + (x * LEAKY_SLOPE)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Log-sum-exp over `dim` with a detached shift.
pub fn log_sum_exp(x: &Tensor, dim: usize) -> Result<Tensor> {
    let shift = x.max_keepdim(dim)?.detach();
    let sum = x.broadcast_sub(&shift)?.exp()?.sum_keepdim(dim)?;
    Ok((sum.log()? + shift)?.squeeze(dim)?)
}

/// Rows scaled to unit Euclidean norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Instance normalization followed by a per-sample affine transform.
/// `scale` and `shift` have shape (B, C); the effective gain is `1 + scale`.
pub fn adaptive_instance_norm(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    let gain = (scale.reshape((b, c, 1, 1))? + 1.0)?;
    let bias = shift.reshape((b, c, 1, 1))?;
    Ok(normed.broadcast_mul(&gain)?.broadcast_add(&bias)?)
}
