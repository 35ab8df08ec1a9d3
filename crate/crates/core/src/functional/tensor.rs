use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::TensorShape;

/// Real-valued tensor, row-major (N, C, H, W). Weights reuse the layout as
/// (C_out, C_in / groups, k, k).
#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    pub shape: TensorShape,
    pub data: Vec<f64>,
}

impl FloatTensor {
    pub fn new(shape: TensorShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::tensor(format!("{} values for shape {shape}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::tensor("non-finite value"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: TensorShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn from_fn(shape: TensorShape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.batch {
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.channels + c) * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Channels `[start, start + count)` as a new tensor.
    pub fn channel_slice(&self, start: usize, count: usize) -> FloatTensor {
        let s = self.shape;
        let plane = s.pixels();
        let mut data = Vec::with_capacity(s.batch * count * plane);
        for n in 0..s.batch {
            let base = (n * s.channels + start) * plane;
            data.extend_from_slice(&self.data[base..base + count * plane]);
        }
        FloatTensor {
            shape: s.with_channels(count),
            data,
        }
    }

    /// Concatenate along channels.
    pub fn concat_channels(parts: &[FloatTensor]) -> Result<FloatTensor> {
        let first = parts.first().ok_or_else(|| Error::tensor("concat of nothing"))?;
        let s = first.shape;
        if s.batch != 1 || parts.iter().any(|p| p.shape.pixels() != s.pixels() || p.shape.batch != 1) {
            return Err(Error::tensor("concat needs equal spatial dims and batch 1"));
        }
        let channels = parts.iter().map(|p| p.shape.channels).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(FloatTensor {
            shape: s.with_channels(channels),
            data,
        })
    }
}

/// Symmetric per-tensor FIX8 quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    #[serde(default = "eight")]
    pub bit_width: u32,
    #[serde(default)]
    pub zero_point: i32,
}

fn eight() -> u32 {
    8
}

impl QuantParams {
    pub fn new(scale: f64) -> Self {
        assert!(scale > 0.0 && scale.is_finite(), "quantization scale must be positive, got {scale}");
        Self {
            scale,
            bit_width: 8,
            zero_point: 0,
        }
    }
}

impl Default for QuantParams {
    fn default() -> Self {
        Self::new(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub shape: TensorShape,
    pub data: Vec<i8>,
    pub params: QuantParams,
}

impl QuantTensor {
    pub fn new(shape: TensorShape, data: Vec<i8>, params: QuantParams) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::tensor(format!("{} values for shape {shape}", data.len())));
        }
        Ok(Self { shape, data, params })
    }

    pub fn zeros(shape: TensorShape, params: QuantParams) -> Self {
        Self {
            shape,
            data: vec![0; shape.numel()],
            params,
        }
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.channels + c) * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> i8 {
        self.data[self.index(n, c, y, x)]
    }

    /// Largest element-wise difference in LSBs; `None` if shapes differ.
    pub fn max_lsb_diff(&self, other: &QuantTensor) -> Option<u32> {
        (self.shape == other.shape).then(|| {
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (*a as i32 - *b as i32).unsigned_abs())
                .max()
                .unwrap_or(0)
        })
    }
}

/// `rows x cols` int8 matrix in row-major order; token-major (n x d) when it
/// holds attention operands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i8>,
}

impl TokenMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<i8>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    /// Channels `[c0, c0 + cols)` of a (1, C, H, W) tensor as tokens x channels.
    pub fn from_channels(t: &QuantTensor, c0: usize, cols: usize) -> Self {
        let n = t.shape.pixels();
        let mut data = vec![0i8; n * cols];
        for j in 0..cols {
            let base = (c0 + j) * n;
            for tok in 0..n {
                data[tok * cols + j] = t.data[base + tok];
            }
        }
        Self { rows: n, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> i8 {
        self.data[r * self.cols + c]
    }

    pub fn relu(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v.max(0)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0i8; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}
