//! Dense BEV grid numerics.
//!
//! Everything downstream exchanges [`FeatureGrid`] values: a `C×H×W` block of
//! `f64` in row-major `(c, h, w)` order. Spatial maps (`H×W`) are kept as a
//! separate type at the API boundary and as single-channel grids on the tape.
//!
//! The pure operations live in [`ops`]; [`tape`] records the same kernels
//! together with their adjoints so composite modules can be differentiated,
//! and [`gradcheck`] compares those adjoints against central differences.

pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod tape;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

pub use ops::{
    activate, activate_map, conv2d, max_pool2x2, pool_channels, resize_bilinear, sample_bilinear,
    softmax_stack,
};

/// Dense `C×H×W` feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape_err!(
                "data length {} does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for h in 0..height {
                for w in 0..width {
                    data.push(f(c, h, w));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    /// Uniform random values in `[lo, hi)`.
    pub fn random(
        channels: usize,
        height: usize,
        width: usize,
        lo: f64,
        hi: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self::from_fn(channels, height, width, |_, _, _| rng.random_range(lo..hi))
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.height + h) * self.width + w
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, h: usize, w: usize, value: f64) {
        let i = self.index(c, h, w);
        self.data[i] = value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// The `C` values stacked at one cell.
    pub fn column(&self, h: usize, w: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, h, w)).collect()
    }

    pub fn same_shape(&self, other: &FeatureGrid) -> bool {
        self.shape() == other.shape()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &FeatureGrid, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(shape_err!(
                "shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &FeatureGrid) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Concatenate grids along the channel axis.
    pub fn concat(grids: &[&FeatureGrid]) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| shape_err!("concat of zero grids"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for g in grids {
            if g.height != h || g.width != w {
                return Err(shape_err!("concat spatial mismatch"));
            }
            channels += g.channels;
            data.extend_from_slice(&g.data);
        }
        Self::new(channels, h, w, data)
    }
}

/// `H×W` real-valued map (confidence, importance, attention, selection).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SpatialMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!(
                "map data length {} does not match {}x{}",
                data.len(),
                height,
                width
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for h in 0..height {
            for w in 0..width {
                data.push(f(h, w));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.data[h * self.width + w]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, value: f64) {
        self.data[h * self.width + w] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn to_grid(&self) -> FeatureGrid {
        FeatureGrid {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.data.clone(),
        }
    }

    pub fn from_grid(grid: FeatureGrid) -> Result<Self> {
        if grid.channels != 1 {
            return Err(shape_err!(
                "expected a single-channel grid, got {} channels",
                grid.channels
            ));
        }
        Ok(Self {
            height: grid.height,
            width: grid.width,
            data: grid.data,
        })
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the forward output `y` and input `x`.
    #[inline]
    pub(crate) fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(out_channels: usize, in_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        }
    }

    /// Same-size 1×1 or k×k convolution (`padding = k / 2`).
    pub fn same(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        Self::new(out_channels, in_channels, kernel, 1, kernel / 2)
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let ph = height + 2 * self.padding;
        let pw = width + 2 * self.padding;
        if self.stride == 0 {
            return Err(shape_err!("stride must be positive"));
        }
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(shape_err!(
                "kernel {}x{} larger than padded input {}x{}",
                self.kernel_h,
                self.kernel_w,
                ph,
                pw
            ));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn fan_out(&self) -> usize {
        self.out_channels * self.kernel_h * self.kernel_w
    }
}

/// Convolution weights `(out, in, kH, kW)` plus per-output bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub geom: ConvGeom,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn new(geom: ConvGeom, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != geom.weight_len() || bias.len() != geom.out_channels {
            return Err(shape_err!(
                "conv params: weight {} (want {}), bias {} (want {})",
                weight.len(),
                geom.weight_len(),
                bias.len(),
                geom.out_channels
            ));
        }
        Ok(Self { geom, weight, bias })
    }

    pub fn zeros(geom: ConvGeom) -> Self {
        Self {
            geom,
            weight: vec![0.0; geom.weight_len()],
            bias: vec![0.0; geom.out_channels],
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn xavier(geom: ConvGeom, rng: &mut impl Rng) -> Self {
        let weight = xavier_uniform(geom.weight_len(), geom.fan_in(), geom.fan_out(), rng);
        Self {
            geom,
            weight,
            bias: vec![0.0; geom.out_channels],
        }
    }

    /// 1×1 identity mapping on `channels` channels.
    pub fn identity(channels: usize) -> Self {
        let geom = ConvGeom::same(channels, channels, 1);
        let mut p = Self::zeros(geom);
        for c in 0..channels {
            p.weight[c * channels + c] = 1.0;
        }
        p
    }

    #[inline]
    pub fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        let g = &self.geom;
        self.weight[((o * g.in_channels + i) * g.kernel_h + ky) * g.kernel_w + kx]
    }
}

pub(crate) fn xavier_uniform(len: usize, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}
