//! Dense H×W×C arrays and the domain newtypes built on them.

use crate::error::{Error, Result};

/// Row-major H×W×C array of `f64`. Element `(i, j, c)` lives at
/// `(i * width + j) * channels + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Tensor {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "tensor data has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Tensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    data.push(f(i, j, c));
                }
            }
        }
        Tensor {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::filled(1, 1, 1, value)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn same_spatial(&self, other: &Tensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, c: usize) -> usize {
        (i * self.width + j) * self.channels + c
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[self.index(i, j, c)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, value: f64) {
        let idx = self.index(i, j, c);
        self.data[idx] = value;
    }

    /// Channel vector of pixel `(i, j)`.
    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.width + j) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other, "zip_map")?;
        Ok(Tensor {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        })
    }

    pub fn scaled(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (h, w) = (first.height, first.width);
        if parts.iter().any(|t| t.height != h || t.width != w) {
            return Err(Error::invalid("concat: spatial shapes differ"));
        }
        let channels: usize = parts.iter().map(|t| t.channels).sum();
        let mut data = Vec::with_capacity(h * w * channels);
        for p in 0..h * w {
            for t in parts {
                data.extend_from_slice(&t.data[p * t.channels..(p + 1) * t.channels]);
            }
        }
        Ok(Tensor {
            height: h,
            width: w,
            channels,
            data,
        })
    }

    /// Copies channels `[start, start + count)` into a new tensor.
    pub fn channel_slice(&self, start: usize, count: usize) -> Result<Tensor> {
        if start + count > self.channels {
            return Err(Error::invalid("channel slice out of range"));
        }
        Ok(Tensor::from_fn(self.height, self.width, count, |i, j, c| {
            self.get(i, j, start + c)
        }))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// An image with values nominally in `[0, 1]` and 1 or 3 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame(Tensor);

impl Frame {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if !matches!(tensor.channels(), 1 | 3) {
            return Err(Error::invalid(format!(
                "frame must have 1 or 3 channels, got {}",
                tensor.channels()
            )));
        }
        if tensor.height() == 0 || tensor.width() == 0 {
            return Err(Error::invalid("frame has zero size"));
        }
        if !tensor.is_finite() {
            return Err(Error::invalid("frame contains non-finite values"));
        }
        Ok(Frame(tensor))
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Frame::new(Tensor::filled(height, width, channels, value))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn channels(&self) -> usize {
        self.0.channels()
    }

    /// Luma (BT.601 weights) for 3-channel frames, identity for 1 channel.
    pub fn luminance(&self) -> Tensor {
        let t = &self.0;
        if t.channels() == 1 {
            return t.clone();
        }
        Tensor::from_fn(t.height(), t.width(), 1, |i, j, _| {
            let p = t.pixel(i, j);
            0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
        })
    }
}

/// Per-pixel displacement in pixels: channel 0 horizontal (u), channel 1 vertical (v).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(Tensor);

impl FlowField {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.channels() != 2 {
            return Err(Error::invalid(format!(
                "flow field must have 2 channels, got {}",
                tensor.channels()
            )));
        }
        if !tensor.is_finite() {
            return Err(Error::invalid("flow field contains non-finite values"));
        }
        Ok(FlowField(tensor))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField(Tensor::zeros(height, width, 2))
    }

    pub fn constant(height: usize, width: usize, u: f64, v: f64) -> Self {
        FlowField(Tensor::from_fn(height, width, 2, |_, _, c| {
            if c == 0 {
                u
            } else {
                v
            }
        }))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn u(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j, 0)
    }

    pub fn v(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j, 1)
    }

    /// Mean Euclidean length of the displacement vectors.
    pub fn mean_magnitude(&self) -> f64 {
        let t = &self.0;
        let n = t.height() * t.width();
        t.data()
            .chunks_exact(2)
            .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
            .sum::<f64>()
            / n as f64
    }
}

/// Fractional position of the synthesized frame, strictly inside `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct TimeStep(f64);

impl TimeStep {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!(
                "time step must lie in the open interval (0, 1), got {alpha}"
            )));
        }
        Ok(TimeStep(alpha))
    }

    pub const HALF: TimeStep = TimeStep(0.5);

    pub fn value(self) -> f64 {
        self.0
    }
}
