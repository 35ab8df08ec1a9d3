use crate::error::{Error, Result};
use crate::ir::{Activation, LayerDesc, TensorShape};
use crate::par;

use super::tensor::FloatTensor;

/// Cross-correlation with zero padding, grouped, in a fixed summation order
/// (input channel, kernel row, kernel column) so results do not depend on
/// threading.
pub fn conv2d_ref(x: &FloatTensor, w: &FloatTensor, bias: &[f64], desc: &LayerDesc) -> Result<FloatTensor> {
    let out_shape = check_conv_shapes(x.shape, w.shape, bias.len(), desc)?;
    let (k, s, p) = (desc.kernel, desc.stride, desc.padding);
    let cin_g = x.shape.channels / desc.groups;
    let cout_g = desc.out_channels / desc.groups;
    let (h, wd) = (x.shape.height as isize, x.shape.width as isize);
    let plane = out_shape.pixels();

    let per_channel = par::map_range(out_shape.batch * out_shape.channels, |nc| {
        let (n, oc) = (nc / out_shape.channels, nc % out_shape.channels);
        let g = oc / cout_g;
        let mut out = vec![0.0; plane];
        for oy in 0..out_shape.height {
            for ox in 0..out_shape.width {
                let mut acc = 0.0;
                for icg in 0..cin_g {
                    let ic = g * cin_g + icg;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= wd {
                                continue;
                            }
                            acc += x.at(n, ic, iy as usize, ix as usize) * w.at(oc, icg, ky, kx);
                        }
                    }
                }
                out[oy * out_shape.width + ox] = acc + bias[oc];
            }
        }
        out
    });
    Ok(FloatTensor {
        shape: out_shape,
        data: per_channel.concat(),
    })
}

pub(crate) fn check_conv_shapes(
    x: TensorShape,
    w: TensorShape,
    bias_len: usize,
    desc: &LayerDesc,
) -> Result<TensorShape> {
    if desc.groups == 0 || !x.channels.is_multiple_of(desc.groups) || !desc.out_channels.is_multiple_of(desc.groups) {
        return Err(Error::tensor(format!(
            "groups {} must divide {} input and {} output channels",
            desc.groups, x.channels, desc.out_channels
        )));
    }
    if x.channels != desc.in_channels {
        return Err(Error::tensor(format!(
            "input has {} channels, layer expects {}",
            x.channels, desc.in_channels
        )));
    }
    let expect = TensorShape::new(desc.out_channels, x.channels / desc.groups, desc.kernel, desc.kernel);
    if w != expect {
        return Err(Error::tensor(format!("weight shape {w}, expected {expect}")));
    }
    if bias_len != desc.out_channels {
        return Err(Error::tensor(format!(
            "{bias_len} bias values for {} output channels",
            desc.out_channels
        )));
    }
    if x.height + 2 * desc.padding < desc.kernel || x.width + 2 * desc.padding < desc.kernel {
        return Err(Error::tensor(format!("kernel {} larger than padded input {x}", desc.kernel)));
    }
    let oh = (x.height + 2 * desc.padding - desc.kernel) / desc.stride + 1;
    let ow = (x.width + 2 * desc.padding - desc.kernel) / desc.stride + 1;
    Ok(TensorShape {
        batch: x.batch,
        channels: desc.out_channels,
        height: oh,
        width: ow,
    })
}

pub fn hardswish(x: f64) -> f64 {
    x * (x + 3.0).clamp(0.0, 6.0) / 6.0
}

pub(crate) fn apply_activation(x: f64, kind: Activation) -> f64 {
    match kind {
        Activation::None => x,
        Activation::ReLU => x.max(0.0),
        Activation::Hardswish => hardswish(x),
    }
}

pub fn activation_ref(x: &FloatTensor, kind: Activation) -> FloatTensor {
    FloatTensor {
        shape: x.shape,
        data: x.data.iter().map(|&v| apply_activation(v, kind)).collect(),
    }
}

pub fn residual_add_ref(a: &FloatTensor, b: &FloatTensor, kind: Activation) -> Result<FloatTensor> {
    if a.shape != b.shape {
        return Err(Error::tensor(format!("residual operands {} and {}", a.shape, b.shape)));
    }
    Ok(FloatTensor {
        shape: a.shape,
        data: a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| apply_activation(x + y, kind))
            .collect(),
    })
}

/// Per-channel BatchNorm statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: 0.0,
        }
    }

    pub fn apply(&self, x: &FloatTensor) -> FloatTensor {
        let plane = x.shape.pixels();
        let c = x.shape.channels;
        FloatTensor {
            shape: x.shape,
            data: x
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let ch = (i / plane) % c;
                    self.gamma[ch] * (v - self.mean[ch]) / (self.var[ch] + self.eps).sqrt() + self.beta[ch]
                })
                .collect(),
        }
    }
}

/// Fold BN into the preceding conv: w' = w·γ/σ, b' = (b − μ)·γ/σ + β.
pub fn fold_batchnorm(w: &FloatTensor, b: &[f64], bn: &BatchNorm) -> (FloatTensor, Vec<f64>) {
    let cout = w.shape.batch;
    assert!(
        b.len() == cout && bn.gamma.len() == cout && bn.beta.len() == cout && bn.mean.len() == cout && bn.var.len() == cout,
        "BatchNorm channel count must match conv output channels"
    );
    let per = w.shape.numel() / cout.max(1);
    let factor: Vec<f64> = (0..cout).map(|c| bn.gamma[c] / (bn.var[c] + bn.eps).sqrt()).collect();
    let data = w.data.iter().enumerate().map(|(i, &v)| v * factor[i / per]).collect();
    let bias = (0..cout).map(|c| (b[c] - bn.mean[c]) * factor[c] + bn.beta[c]).collect();
    (FloatTensor { shape: w.shape, data }, bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_endpoints() {
        assert_eq!(apply_activation(-1.5, Activation::ReLU), 0.0);
        assert_eq!(hardswish(3.0), 3.0);
        assert_eq!(hardswish(-3.0), 0.0);
        assert!((hardswish(1.0) - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn ones_dw_counts_window() {
        let x = FloatTensor::from_fn(TensorShape::new(1, 1, 4, 4), |_, _, _, _| 1.0);
        let w = FloatTensor::from_fn(TensorShape::new(1, 1, 3, 3), |_, _, _, _| 1.0);
        let y = conv2d_ref(&x, &w, &[0.0], &LayerDesc::dw(1, 3, 1)).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn wrong_weight_shape_rejected() {
        let x = FloatTensor::zeros(TensorShape::new(1, 2, 4, 4));
        let w = FloatTensor::zeros(TensorShape::new(3, 3, 1, 1));
        assert!(conv2d_ref(&x, &w, &[0.0; 3], &LayerDesc::pw(2, 3)).is_err());
    }

    #[test]
    fn bn_scaling_folds_into_weights() {
        let w = FloatTensor::from_fn(TensorShape::new(2, 1, 1, 1), |n, _, _, _| n as f64 + 1.0);
        let mut bn = BatchNorm::identity(2);
        bn.gamma = vec![2.0, 2.0];
        let (w2, b2) = fold_batchnorm(&w, &[0.5, -1.0], &bn);
        assert_eq!(w2.data, vec![2.0, 4.0]);
        assert_eq!(b2, vec![1.0, -2.0]);
    }
}
