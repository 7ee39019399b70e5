use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::mlp::{GlobalMlp, LocalMlp};
use super::scse::Scse;
use super::spectral::SpectralTransform;
use crate::error::{Error, Result};
use crate::nn::{split_channels, Conv2d, ConvNormAct, InstanceNorm, Params};

/// Which sub-blocks a GLCI block is built from. Everything except `Full`
/// swaps parts of the block for plain 3×3 convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GlciVariant {
    #[default]
    Full,
    /// The whole block is a residual 3×3 convolution.
    Conv3x3,
    /// Both propagation paths are 3×3 convolutions.
    ConvPropagation,
    /// Global→local propagation (scSE) is a 3×3 convolution.
    ScseAsConv,
    /// Local→global propagation (spectral transform) is a 3×3 convolution.
    SpectralAsConv,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GlciConfig {
    pub channels: usize,
    pub local_block: (usize, usize),
    pub global_grid: (usize, usize),
    pub hidden_ratio: usize,
    #[serde(default)]
    pub variant: GlciVariant,
}

impl GlciConfig {
    pub fn new(channels: usize, local_block: (usize, usize), global_grid: (usize, usize)) -> Self {
        Self {
            channels,
            local_block,
            global_grid,
            hidden_ratio: 2,
            variant: GlciVariant::Full,
        }
    }
}

#[derive(Debug, Clone)]
enum Propagation {
    Spectral(SpectralTransform),
    Scse(Scse),
    Conv(Conv2d),
}

impl Propagation {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Propagation::Spectral(s) => s.forward(x),
            Propagation::Scse(s) => s.forward(x),
            Propagation::Conv(c) => c.forward(x),
        }
    }
}

/// Global and local context interaction block.
///
/// Channels are split in half. The local half goes through the local MLP, the
/// global half through the global MLP. The spectral transform of the local
/// features is added to the global branch and the scSE-recalibrated global
/// features are added to the local branch. The two halves are concatenated,
/// fused by a 1×1 convolution and added to the input.
#[derive(Debug, Clone)]
pub struct Glci {
    cfg: GlciConfig,
    norm: InstanceNorm,
    local: LocalMlp,
    global: GlobalMlp,
    to_global: Propagation,
    to_local: Propagation,
    fuse: Conv2d,
}

impl Glci {
    pub fn new(p: &Params, cfg: &GlciConfig) -> Result<Self> {
        if cfg.channels % 2 != 0 || cfg.channels == 0 {
            return Err(Error::contract(format!(
                "GLCI needs an even channel count, got {}",
                cfg.channels
            )));
        }
        let half = cfg.channels / 2;
        let conv = |name: &str| -> Result<Propagation> {
            Ok(Propagation::Conv(Conv2d::new(&p.pp(name), half, half, 3, 1)?))
        };
        let (to_global, to_local) = match cfg.variant {
            GlciVariant::Full => (
                Propagation::Spectral(SpectralTransform::new(&p.pp("spectral"), half)?),
                Propagation::Scse(Scse::new(&p.pp("scse"), half, 2)?),
            ),
            GlciVariant::ScseAsConv => (
                Propagation::Spectral(SpectralTransform::new(&p.pp("spectral"), half)?),
                conv("to_local")?,
            ),
            GlciVariant::SpectralAsConv => {
                (conv("to_global")?, Propagation::Scse(Scse::new(&p.pp("scse"), half, 2)?))
            }
            GlciVariant::ConvPropagation => (conv("to_global")?, conv("to_local")?),
            GlciVariant::Conv3x3 => {
                return Err(Error::contract("Conv3x3 variant is built by BackboneBlock"))
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            norm: InstanceNorm::new(&p.pp("norm"), cfg.channels)?,
            local: LocalMlp::new(&p.pp("local"), cfg.local_block, cfg.hidden_ratio)?,
            global: GlobalMlp::new(&p.pp("global"), cfg.global_grid, cfg.hidden_ratio)?,
            to_global,
            to_local,
            fuse: Conv2d::new(&p.pp("fuse"), cfg.channels, cfg.channels, 1, 1)?,
        })
    }

    pub fn config(&self) -> &GlciConfig {
        &self.cfg
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (local_in, global_in) = split_channels(&self.norm.forward(x)?)?;
        let local = self.local.forward(&local_in)?;
        let global = self.global.forward(&global_in)?;
        let global_out = (&global + self.to_global.forward(&local)?)?;
        let local_out = (&local + self.to_local.forward(&global)?)?;
        let merged = Tensor::cat(&[&local_out, &global_out], 1)?;
        Ok((x + self.fuse.forward(&merged)?)?)
    }
}

/// Fast-Fourier-convolution block: cross-connected local/global halves where
/// the global→global path is a spectral transform and every other path is a
/// 3×3 convolution.
#[derive(Debug, Clone)]
pub struct FfcBlock {
    norm: InstanceNorm,
    local_to_local: Conv2d,
    global_to_local: Conv2d,
    local_to_global: Conv2d,
    global_to_global: SpectralTransform,
    local_norm: InstanceNorm,
    global_norm: InstanceNorm,
    fuse: Conv2d,
}

impl FfcBlock {
    pub fn new(p: &Params, channels: usize) -> Result<Self> {
        if channels % 2 != 0 || channels == 0 {
            return Err(Error::contract("FFC needs an even channel count"));
        }
        let half = channels / 2;
        Ok(Self {
            norm: InstanceNorm::new(&p.pp("norm"), channels)?,
            local_to_local: Conv2d::new(&p.pp("l2l"), half, half, 3, 1)?,
            global_to_local: Conv2d::new(&p.pp("g2l"), half, half, 3, 1)?,
            local_to_global: Conv2d::new(&p.pp("l2g"), half, half, 3, 1)?,
            global_to_global: SpectralTransform::new(&p.pp("g2g"), half)?,
            local_norm: InstanceNorm::new(&p.pp("local_norm"), half)?,
            global_norm: InstanceNorm::new(&p.pp("global_norm"), half)?,
            fuse: Conv2d::new(&p.pp("fuse"), channels, channels, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (l, g) = split_channels(&self.norm.forward(x)?)?;
        let l_out = (self.local_to_local.forward(&l)? + self.global_to_local.forward(&g)?)?;
        let g_out = (self.local_to_global.forward(&l)? + self.global_to_global.forward(&g)?)?;
        let l_out = self.local_norm.forward(&l_out)?.gelu_erf()?;
        let g_out = self.global_norm.forward(&g_out)?.gelu_erf()?;
        let merged = Tensor::cat(&[&l_out, &g_out], 1)?;
        Ok((x + self.fuse.forward(&merged)?)?)
    }
}

/// Plain residual 3×3 convolution block.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    first: ConvNormAct,
    second: Conv2d,
}

impl ConvBlock {
    pub fn new(p: &Params, channels: usize) -> Result<Self> {
        Ok(Self {
            first: ConvNormAct::new(&p.pp("conv1"), channels, channels, 3, 1)?,
            second: Conv2d::new(&p.pp("conv2"), channels, channels, 3, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + self.second.forward(&self.first.forward(x)?)?)?)
    }
}

/// Which block family the restoration backbones are built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    #[default]
    Glci,
    Ffc,
}

/// One residual block of a restoration backbone.
#[derive(Debug, Clone)]
pub enum BackboneBlock {
    Glci(Glci),
    Ffc(FfcBlock),
    Conv(ConvBlock),
}

impl BackboneBlock {
    pub fn new(p: &Params, kind: BlockKind, cfg: &GlciConfig) -> Result<Self> {
        Ok(match (kind, cfg.variant) {
            (BlockKind::Ffc, _) => BackboneBlock::Ffc(FfcBlock::new(p, cfg.channels)?),
            (BlockKind::Glci, GlciVariant::Conv3x3) => {
                BackboneBlock::Conv(ConvBlock::new(p, cfg.channels)?)
            }
            (BlockKind::Glci, _) => BackboneBlock::Glci(Glci::new(p, cfg)?),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            BackboneBlock::Glci(b) => b.forward(x),
            BackboneBlock::Ffc(b) => b.forward(x),
            BackboneBlock::Conv(b) => b.forward(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::testing::{random_tensor, zero_biases};
    use candle_core::{DType, Device};

    #[test]
    fn zero_input_gives_zero_output() {
        let p = Params::new(2, DType::F64, &Device::Cpu);
        let glci = Glci::new(&p, &GlciConfig::new(4, (2, 2), (2, 2))).unwrap();
        zero_biases(&p);
        let x = Tensor::zeros((1, 4, 6, 4), DType::F64, &Device::Cpu).unwrap();
        let y: f64 = glci.forward(&x).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(y, 0.0);
    }

    #[test]
    fn every_variant_preserves_shape() {
        for variant in [
            GlciVariant::Full,
            GlciVariant::Conv3x3,
            GlciVariant::ConvPropagation,
            GlciVariant::ScseAsConv,
            GlciVariant::SpectralAsConv,
        ] {
            for kind in [BlockKind::Glci, BlockKind::Ffc] {
                let p = Params::new(4, DType::F64, &Device::Cpu);
                let cfg = GlciConfig {
                    variant,
                    ..GlciConfig::new(6, (2, 2), (2, 2))
                };
                let block = BackboneBlock::new(&p, kind, &cfg).unwrap();
                let x = random_tensor(&[2, 6, 5, 7], 1);
                assert_eq!(block.forward(&x).unwrap().dims(), x.dims());
            }
        }
    }

    #[test]
    fn odd_channels_rejected() {
        let p = Params::new(0, DType::F64, &Device::Cpu);
        assert!(matches!(
            Glci::new(&p, &GlciConfig::new(5, (2, 2), (2, 2))),
            Err(Error::Contract(_))
        ));
    }
}
