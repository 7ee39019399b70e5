use candle_core::Tensor;

use super::params::{Init, Params};
use crate::error::{Error, Result};

/// Affine map over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(p: &Params, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            weight: p.get((fan_out, fan_in), "weight", Init::Uniform(bound))?,
            bias: p.get(fan_out, "bias", Init::Uniform(bound))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let fan_in = *dims.last().ok_or_else(|| Error::contract("linear on a scalar"))?;
        let rows = x.elem_count() / fan_in;
        let y = x
            .reshape((rows, fan_in))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Per-sample, per-channel normalization over the spatial axes with an
/// affine transform.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl InstanceNorm {
    pub fn new(p: &Params, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.get(channels, "gamma", Init::Const(1.0))?,
            beta: p.get(channels, "beta", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let flat = x.reshape((n, c, h * w))?;
        let mean = flat.mean_keepdim(2)?;
        let centered = flat.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1))?)?
            .reshape((n, c, h, w))?)
    }
}

/// Convolution followed by instance normalization and GELU.
#[derive(Debug, Clone)]
pub struct ConvNormAct {
    conv: super::Conv2d,
    norm: InstanceNorm,
}

impl ConvNormAct {
    pub fn new(p: &Params, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: super::Conv2d::new(&p.pp("conv"), cin, cout, kernel, stride)?,
            norm: InstanceNorm::new(&p.pp("norm"), cout)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.gelu_erf()?)
    }
}

/// Two 3×3 convolutions with an identity (or 1×1 projected) shortcut.
#[derive(Debug, Clone)]
pub struct ResBlock {
    first: ConvNormAct,
    second: super::Conv2d,
    norm: InstanceNorm,
    shortcut: Option<super::Conv2d>,
}

impl ResBlock {
    pub fn new(p: &Params, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            first: ConvNormAct::new(&p.pp("conv1"), cin, cout, 3, 1)?,
            second: super::Conv2d::new(&p.pp("conv2"), cout, cout, 3, 1)?,
            norm: InstanceNorm::new(&p.pp("norm2"), cout)?,
            shortcut: if cin == cout {
                None
            } else {
                Some(super::Conv2d::new(&p.pp("shortcut"), cin, cout, 1, 1)?)
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.norm.forward(&self.second.forward(&self.first.forward(x)?)?)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((y + skip)?.gelu_erf()?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Splits `N×C×H×W` into two halves along channels.
pub fn split_channels(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let c = x.dim(1)?;
    if c % 2 != 0 {
        return Err(Error::contract(format!("cannot split odd channel count {c}")));
    }
    Ok((x.narrow(1, 0, c / 2)?, x.narrow(1, c / 2, c / 2)?))
}

fn reflect_index(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

/// Reflection-pads the bottom and right edges so that height and width become
/// multiples of `mh` and `mw`.
pub fn reflect_pad_to_multiple(x: &Tensor, mh: usize, mw: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let th = h.div_ceil(mh) * mh;
    let tw = w.div_ceil(mw) * mw;
    reflect_pad_to(x, th, tw)
}

/// Reflection-pads the bottom and right edges to exactly `th`×`tw`.
pub fn reflect_pad_to(x: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if th < h || tw < w {
        return Err(Error::contract("padding target smaller than input"));
    }
    let mut out = x.contiguous()?;
    if th > h {
        let idx: Vec<u32> = (0..th).map(|i| reflect_index(i, h) as u32).collect();
        let idx = Tensor::from_vec(idx, th, x.device())?;
        out = out.index_select(&idx, 2)?;
    }
    if tw > w {
        let idx: Vec<u32> = (0..tw).map(|i| reflect_index(i, w) as u32).collect();
        let idx = Tensor::from_vec(idx, tw, x.device())?;
        out = out.contiguous()?.index_select(&idx, 3)?;
    }
    Ok(out)
}

/// Keeps the top-left `h`×`w` window.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, xh, xw) = x.dims4()?;
    if (xh, xw) == (h, w) {
        return Ok(x.clone());
    }
    Ok(x.narrow(2, 0, h)?.narrow(3, 0, w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn reflect_padding_mirrors_edges() {
        let x = Tensor::arange(0f64, 3.0, &Device::Cpu).unwrap().reshape((1, 1, 1, 3)).unwrap();
        let padded = reflect_pad_to(&x, 1, 6).unwrap();
        let v: Vec<f64> = padded.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![0.0, 1.0, 2.0, 1.0, 0.0, 1.0]);
        let back = crop(&padded, 1, 3).unwrap();
        assert_eq!(back.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn instance_norm_is_batch_independent() {
        let p = Params::new(0, DType::F64, &Device::Cpu);
        let norm = InstanceNorm::new(&p, 2).unwrap();
        let a = Tensor::arange(0f64, 32.0, &Device::Cpu).unwrap().reshape((1, 2, 4, 4)).unwrap();
        let b = (a.clone() * 3.0).unwrap();
        let both = Tensor::cat(&[&a, &b], 0).unwrap();
        let single = norm.forward(&a).unwrap();
        let batched = norm.forward(&both).unwrap().get(0).unwrap().unsqueeze(0).unwrap();
        let diff: f64 = (single - batched).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn linear_maps_last_axis() {
        let p = Params::new(0, DType::F64, &Device::Cpu);
        let lin = Linear::new(&p, 4, 3).unwrap();
        let x = Tensor::zeros((2, 5, 4), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(lin.forward(&x).unwrap().dims(), &[2, 5, 3]);
    }

    #[test]
    fn odd_split_is_rejected() {
        let x = Tensor::zeros((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(split_channels(&x).is_err());
    }
}
