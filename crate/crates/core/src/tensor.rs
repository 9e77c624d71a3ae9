//! Dense rank-4 tensors in NHWC layout.
//!
//! Every value flowing through the network is a `Tensor<T>` of shape
//! `(batch, height, width, channels)` with channels varying fastest.
//! Convolution kernels reuse the same container with the axes read as
//! `(kernel_h, kernel_w, in_channels, out_channels)`, and per-channel vectors
//! are stored as `(1, 1, 1, C)`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Storage precision of a tensor or checkpoint entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    Single,
    Double,
}

impl DType {
    /// Tag byte used in the checkpoint format.
    pub fn tag(self) -> u8 {
        match self {
            DType::Single => 1,
            DType::Double => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(DType::Single),
            2 => Some(DType::Double),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::Single => 4,
            DType::Double => 8,
        }
    }
}

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn from_f64_lossy(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from exactly `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::Single;

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::Double;

    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Shorthand for literal constants in generic code.
#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview = &self.data[..self.data.len().min(8)];
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::dim("tensor construction", "data", expected, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    /// A `(1, 1, 1, len)` vector.
    pub fn vector(values: Vec<T>) -> Self {
        Tensor {
            shape: [1, 1, 1, values.len()],
            data: values,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for b in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    for c in 0..shape[3] {
                        data.push(f([b, y, x, c]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape, "zip_map")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of batch element `b` as a batch-1 tensor.
    pub fn batch_item(&self, b: usize) -> Tensor<T> {
        let stride = self.item_len();
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[b * stride..(b + 1) * stride].to_vec(),
        }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        let [_, h, w, c] = first.shape;
        let mut batch = 0;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        for t in items {
            t.expect_dims(1, h, "stack", "height")?;
            t.expect_dims(2, w, "stack", "width")?;
            t.expect_dims(3, c, "stack", "channels")?;
            batch += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: [batch, h, w, c],
            data,
        })
    }
}

impl<T> Tensor<T> {
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn channels(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, y: usize, x: usize, c: usize) -> usize {
        ((b * self.shape[1] + y) * self.shape[2] + x) * self.shape[3] + c
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> &T {
        &self.data[self.offset(idx[0], idx[1], idx[2], idx[3])]
    }

    #[inline]
    pub fn at_mut(&mut self, idx: [usize; 4]) -> &mut T {
        let o = self.offset(idx[0], idx[1], idx[2], idx[3]);
        &mut self.data[o]
    }

    /// The channel vector at one spatial position.
    #[inline]
    pub fn pixel(&self, b: usize, y: usize, x: usize) -> &[T] {
        let o = self.offset(b, y, x, 0);
        &self.data[o..o + self.shape[3]]
    }

    #[inline]
    pub fn pixel_mut(&mut self, b: usize, y: usize, x: usize) -> &mut [T] {
        let o = self.offset(b, y, x, 0);
        let c = self.shape[3];
        &mut self.data[o..o + c]
    }

    pub fn expect_shape(&self, shape: [usize; 4], context: &'static str) -> Result<()> {
        const AXES: [&str; 4] = ["batch", "height", "width", "channels"];
        for (i, axis) in AXES.iter().enumerate() {
            if self.shape[i] != shape[i] {
                return Err(Error::dim(context, axis, shape[i], self.shape[i]));
            }
        }
        Ok(())
    }

    pub(crate) fn expect_dims(
        &self,
        axis_index: usize,
        expected: usize,
        context: &'static str,
        axis: &'static str,
    ) -> Result<()> {
        if self.shape[axis_index] != expected {
            return Err(Error::dim(context, axis, expected, self.shape[axis_index]));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that the output has `ceil(in / stride)` positions.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(kernel: usize, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        ConvSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            in_channels,
            out_channels,
            stride,
            padding: Padding::Same,
        }
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.kernel_h, self.kernel_w, self.in_channels, self.out_channels]
    }

    /// Output extent and leading pad along one axis.
    pub fn axis_geometry(&self, input: usize, kernel: usize) -> (usize, usize) {
        let s = self.stride;
        match self.padding {
            Padding::Same => {
                let out = input.div_ceil(s);
                let needed = ((out.max(1) - 1) * s + kernel).saturating_sub(input);
                (out, needed / 2)
            }
            Padding::Valid => {
                if input < kernel {
                    (0, 0)
                } else {
                    ((input - kernel) / s + 1, 0)
                }
            }
        }
    }

    pub fn output_hw(&self, height: usize, width: usize) -> (usize, usize) {
        (
            self.axis_geometry(height, self.kernel_h).0,
            self.axis_geometry(width, self.kernel_w).0,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::InvalidArgument("kernel size must be positive".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        Ok(())
    }
}

/// Per-position boolean flags at a block's spatial resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveMask {
    height: usize,
    width: usize,
    flags: Vec<bool>,
}

impl ActiveMask {
    pub fn new(height: usize, width: usize, value: bool) -> Self {
        ActiveMask {
            height,
            width,
            flags: vec![value; height * width],
        }
    }

    pub fn from_flags(height: usize, width: usize, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != height * width {
            return Err(Error::dim("active mask", "flags", height * width, flags.len()));
        }
        Ok(ActiveMask {
            height,
            width,
            flags,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut flags = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                flags.push(f(y, x));
            }
        }
        ActiveMask {
            height,
            width,
            flags,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.flags[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.flags[y * self.width + x] = value;
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn any(&self) -> bool {
        self.flags.iter().any(|&f| f)
    }

    pub fn all(&self) -> bool {
        self.flags.iter().all(|&f| f)
    }

    /// Marks every position within the 3x3 neighbourhood of an active one.
    /// Neighbourhoods are clipped at the borders.
    pub fn dilate3x3(&self) -> ActiveMask {
        let (h, w) = (self.height, self.width);
        ActiveMask::from_fn(h, w, |y, x| {
            let y0 = y.saturating_sub(1);
            let x0 = x.saturating_sub(1);
            (y0..(y + 2).min(h)).any(|yy| (x0..(x + 2).min(w)).any(|xx| self.get(yy, xx)))
        })
    }
}
