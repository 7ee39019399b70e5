use candle_core::{Tensor, D};

use crate::error::Result;
use crate::nn::{sigmoid, Conv2d, Linear, Params};

/// Concurrent spatial and channel squeeze-and-excitation.
///
/// `out = F ⊙ g_channel + F ⊙ g_spatial`, where `g_channel` comes from a
/// bottleneck perceptron on the globally pooled descriptor and `g_spatial`
/// from a 1×1 convolution.
#[derive(Debug, Clone)]
pub struct Scse {
    squeeze: Linear,
    excite: Linear,
    spatial: Conv2d,
}

impl Scse {
    pub fn new(p: &Params, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        Ok(Self {
            squeeze: Linear::new(&p.pp("squeeze"), channels, hidden)?,
            excite: Linear::new(&p.pp("excite"), hidden, channels)?,
            spatial: Conv2d::new(&p.pp("spatial"), channels, 1, 1, 1)?,
        })
    }

    pub fn channel_gate(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, _, _) = x.dims4()?;
        let pooled = x.mean(D::Minus1)?.mean(D::Minus1)?;
        let hidden = self.squeeze.forward(&pooled)?.gelu_erf()?;
        Ok(sigmoid(&self.excite.forward(&hidden)?)?.reshape((n, c, 1, 1))?)
    }

    pub fn spatial_gate(&self, x: &Tensor) -> Result<Tensor> {
        sigmoid(&self.spatial.forward(x)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let channel = x.broadcast_mul(&self.channel_gate(x)?)?;
        let spatial = x.broadcast_mul(&self.spatial_gate(x)?)?;
        Ok((channel + spatial)?)
    }
}
