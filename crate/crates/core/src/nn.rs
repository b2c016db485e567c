//! Parameterized layers: linear, 3-D convolution and its transpose, layer
//! normalization, and conv + leaky-ReLU blocks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use unetrpp_tensor::{ConvGeometry, Element, Tensor};

use crate::error::{Error, Result};

/// Negative slope of every leaky-ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.01;
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Named trainable tensor.
#[derive(Debug, Clone)]
pub struct Param<T: Element> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

impl<T: Element> Param<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        Self { name: name.into(), tensor: tensor.requires_grad(), trainable: true }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    /// Replaces the values, keeping shape and name. Clears the gradient.
    pub fn set_data(&mut self, data: Vec<T>) -> Result<()> {
        self.tensor = Tensor::new(data, self.tensor.shape())?.requires_grad();
        Ok(())
    }
}

/// Anything owning parameters.
pub trait Module<T: Element> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if p.trainable {
                n += p.numel()
            }
        });
        n
    }

    fn zero_grad(&self) {
        self.visit_params(&mut |p| p.tensor.zero_grad());
    }
}

/// Truncated normal (resampled outside ±2σ).
pub fn trunc_normal<T: Element, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::of(z * std);
        }
    })
}

/// He (fan-in) normal initialization.
pub fn he_normal<T: Element, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Conv3d,
    Deconv3d,
    LayerNorm,
    ConvBlock,
}

/// Shape record for constructing a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

impl LayerSpec {
    pub fn linear(in_channels: usize, out_channels: usize) -> Self {
        Self { kind: LayerKind::Linear, in_channels, out_channels, kernel: [1; 3], stride: [1; 3] }
    }

    /// Stride-1 same-padded convolution block (conv + leaky-ReLU).
    pub fn conv_block(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self { kind: LayerKind::ConvBlock, in_channels, out_channels, kernel: [k; 3], stride: [1; 3] }
    }

    /// Non-overlapping strided convolution (kernel = stride).
    pub fn down(in_channels: usize, out_channels: usize, factor: [usize; 3]) -> Self {
        Self { kind: LayerKind::Conv3d, in_channels, out_channels, kernel: factor, stride: factor }
    }

    pub fn up(in_channels: usize, out_channels: usize, factor: [usize; 3]) -> Self {
        Self { kind: LayerKind::Deconv3d, in_channels, out_channels, kernel: factor, stride: factor }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("{:?}: channel counts must be positive", self.kind)));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::Config(format!("{:?}: kernel and stride extents must be ≥ 1", self.kind)));
        }
        if self.kind == LayerKind::Deconv3d && self.kernel != self.stride {
            return Err(Error::Config("deconv3d requires kernel == stride".into()));
        }
        Ok(())
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// `x · W + b` over token rows (`n × C_in → n × C_out`).
#[derive(Debug, Clone)]
pub struct Linear<T: Element> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Element> Linear<T> {
    pub fn new<R: Rng>(name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), trunc_normal(rng, &[c_in, c_out], 0.02)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[c_out])),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        linear(x, &self.weight.tensor, &self.bias.tensor)
    }
}

pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(x.matmul(w)?.add_bias(b, 1)?)
}

impl<T: Element> Module<T> for Linear<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct Conv3d<T: Element> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub geometry: ConvGeometry,
}

impl<T: Element> Conv3d<T> {
    /// Builds a convolution; 3×3×3-style kernels with stride 1 get same
    /// padding, strided (kernel = stride) ones get none.
    pub fn new<R: Rng>(name: &str, spec: &LayerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let k = spec.kernel;
        let geometry = if spec.stride == [1; 3] {
            ConvGeometry::same(k)
        } else if spec.stride == k {
            ConvGeometry::non_overlapping(k)
        } else {
            return Err(Error::Config(format!("conv3d: unsupported kernel {k:?} / stride {:?}", spec.stride)));
        };
        let shape = [spec.out_channels, spec.in_channels, k[0], k[1], k[2]];
        Ok(Self {
            weight: Param::new(
                format!("{name}.weight"),
                he_normal(rng, &shape, spec.in_channels * spec.kernel_volume()),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels])),
            geometry,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.conv3d(&self.weight.tensor, Some(&self.bias.tensor), self.geometry)?)
    }
}

impl<T: Element> Module<T> for Conv3d<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Non-overlapping transposed convolution (upsampling by `kernel`).
#[derive(Debug, Clone)]
pub struct Deconv3d<T: Element> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub kernel: [usize; 3],
}

impl<T: Element> Deconv3d<T> {
    pub fn new<R: Rng>(name: &str, spec: &LayerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        if spec.kind != LayerKind::Deconv3d {
            return Err(Error::Config("deconv3d: spec kind mismatch".into()));
        }
        let k = spec.kernel;
        let shape = [spec.in_channels, spec.out_channels, k[0], k[1], k[2]];
        Ok(Self {
            weight: Param::new(format!("{name}.weight"), he_normal(rng, &shape, spec.in_channels)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels])),
            kernel: k,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.deconv3d(&self.weight.tensor, Some(&self.bias.tensor), self.kernel, self.kernel)?)
    }
}

impl<T: Element> Module<T> for Deconv3d<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T: Element> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
}

impl<T: Element> LayerNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            eps: LAYERNORM_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.layernorm(&self.gamma.tensor, &self.beta.tensor, self.eps)?)
    }
}

impl<T: Element> Module<T> for LayerNorm<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Stride-1 convolution followed by leaky-ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock<T: Element> {
    pub conv: Conv3d<T>,
}

impl<T: Element> ConvBlock<T> {
    pub fn new<R: Rng>(name: &str, spec: &LayerSpec, rng: &mut R) -> Result<Self> {
        if spec.kind != LayerKind::ConvBlock || spec.stride != [1; 3] {
            return Err(Error::Config("convblock: expected a stride-1 convblock spec".into()));
        }
        Ok(Self { conv: Conv3d::new(name, spec, rng)? })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.conv.forward(x)?.leaky_relu(LEAKY_SLOPE))
    }
}

impl<T: Element> Module<T> for ConvBlock<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.conv.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_params_mut(f);
    }
}
