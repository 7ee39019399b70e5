//! Frozen feature extractor for the perceptual loss.
//!
//! Topology is the first three convolutional blocks of VGG16; the three
//! feature maps taken are the activations right before each of the first
//! three max-pooling layers. Weights either come from a local safetensors
//! file using torchvision's `features.<i>.weight` names, or are drawn from a
//! fixed seed so tests never depend on a download.

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv2d, Init, Params};

/// Where the extractor's weights come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    Pretrained { path: PathBuf },
    FixedSeedRandom { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptualConfig {
    pub provenance: Provenance,
    /// Channel widths of the three blocks (64, 128, 256 for VGG16).
    pub widths: [usize; 3],
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            provenance: Provenance::FixedSeedRandom { seed: 0 },
            widths: [64, 128, 256],
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl PerceptualConfig {
    pub fn random(seed: u64, widths: [usize; 3]) -> Self {
        Self {
            provenance: Provenance::FixedSeedRandom { seed },
            widths,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
struct FrozenConv {
    weight: Tensor,
    bias: Tensor,
}

impl FrozenConv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.bias.dim(0)?;
        Ok(conv2d(x, &self.weight, 1, 1)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?
            .relu()?)
    }
}

/// 2×2 max pooling in ceil mode: an odd trailing row or column forms its
/// own window, so tiny inputs never pool down to nothing. Cells past the
/// edge are `-inf` and never win.
///
/// Written as a reshape and a `max` reduction because candle's `max_pool2d`
/// backward scales the gradient by the window size.
fn max_pool2_ceil(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let mut x = x.clone();
    let pad = |x: &Tensor, dim: usize, last: usize| -> Result<Tensor> {
        let edge = x.narrow(dim, last, 1)?.zeros_like()?.affine(1.0, f64::NEG_INFINITY)?;
        Ok(Tensor::cat(&[x, &edge], dim)?)
    };
    if h % 2 == 1 {
        x = pad(&x, 2, h - 1)?;
    }
    if w % 2 == 1 {
        x = pad(&x, 3, w - 1)?;
    }
    let (n, c, h, w) = x.dims4()?;
    let windows = x
        .reshape((n, c, h / 2, 2, w / 2, 2))?
        .permute((0, 1, 2, 4, 3, 5))?
        .reshape((n, c, h / 2, w / 2, 4))?;
    Ok(windows.max(4)?)
}

/// torchvision indices of the convolutions in `vgg16.features[..16]`,
/// grouped by pooling stage.
const VGG_STAGES: [&[usize]; 3] = [&[0, 2], &[5, 7], &[10, 12, 14]];

#[derive(Debug, Clone)]
pub struct PerceptualExtractor {
    config: PerceptualConfig,
    stages: Vec<Vec<FrozenConv>>,
    mean: Tensor,
    std: Tensor,
}

impl PerceptualExtractor {
    pub fn new(config: &PerceptualConfig, dtype: DType, device: &Device) -> Result<Self> {
        let mut shapes = Vec::new();
        let mut cin = 3;
        for (stage, idx) in VGG_STAGES.iter().enumerate() {
            let cout = config.widths[stage];
            let mut layer = Vec::new();
            for &i in idx.iter() {
                layer.push((i, cin, cout));
                cin = cout;
            }
            shapes.push(layer);
        }
        let stages = match &config.provenance {
            Provenance::FixedSeedRandom { seed } => {
                let p = Params::new(*seed, dtype, device);
                shapes
                    .iter()
                    .map(|layer| {
                        layer
                            .iter()
                            .map(|&(i, cin, cout)| {
                                let bound = (6.0 / (cin * 9) as f64).sqrt();
                                let q = p.pp(format!("features.{i}"));
                                Ok(FrozenConv {
                                    weight: q.get((cout, cin, 3, 3), "weight", Init::Uniform(bound))?.detach(),
                                    bias: q.get(cout, "bias", Init::Const(0.0))?.detach(),
                                })
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            Provenance::Pretrained { path } => {
                let tensors = candle_core::safetensors::load(path, device)?;
                let fetch = |name: String, dims: &[usize]| -> Result<Tensor> {
                    let t = tensors
                        .get(&name)
                        .ok_or_else(|| Error::config(format!("pretrained extractor lacks {name}")))?;
                    if t.dims() != dims {
                        return Err(Error::config(format!(
                            "pretrained tensor {name} has shape {:?}, expected {dims:?}",
                            t.dims()
                        )));
                    }
                    Ok(t.to_dtype(dtype)?.detach())
                };
                shapes
                    .iter()
                    .map(|layer| {
                        layer
                            .iter()
                            .map(|&(i, cin, cout)| {
                                Ok(FrozenConv {
                                    weight: fetch(format!("features.{i}.weight"), &[cout, cin, 3, 3])?,
                                    bias: fetch(format!("features.{i}.bias"), &[cout])?,
                                })
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let mean = Tensor::from_vec(config.mean.to_vec(), (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        let std = Tensor::from_vec(config.std.to_vec(), (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        Ok(Self {
            config: config.clone(),
            stages,
            mean,
            std,
        })
    }

    pub fn config(&self) -> &PerceptualConfig {
        &self.config
    }

    /// Frozen `(weight, bias)` pairs, grouped by stage.
    pub fn layers(&self) -> Vec<Vec<(&Tensor, &Tensor)>> {
        self.stages
            .iter()
            .map(|stage| stage.iter().map(|c| (&c.weight, &c.bias)).collect())
            .collect()
    }

    /// The three pre-pooling feature maps of an `N×3×H×W` batch.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        let mut out = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                h = max_pool2_ceil(&h)?;
            }
            for conv in stage {
                h = conv.forward(&h)?;
            }
            out.push(h.clone());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_extractor_is_deterministic() {
        let cfg = PerceptualConfig::random(5, [4, 8, 8]);
        let a = PerceptualExtractor::new(&cfg, DType::F64, &Device::Cpu).unwrap();
        let b = PerceptualExtractor::new(&cfg, DType::F64, &Device::Cpu).unwrap();
        let x = Tensor::rand(0f64, 1.0, (1, 3, 8, 8), &Device::Cpu).unwrap();
        let fa = a.features(&x).unwrap();
        let fb = b.features(&x).unwrap();
        assert_eq!(fa.len(), 3);
        assert_eq!(fa[2].dims(), &[1, 8, 2, 2]);
        for (u, v) in fa.iter().zip(fb.iter()) {
            let d: f64 = (u - v).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn pretrained_loads_by_torchvision_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.safetensors");
        let widths = [2usize, 3, 4];
        let mut tensors = std::collections::HashMap::new();
        let mut cin = 3;
        for (stage, idx) in VGG_STAGES.iter().enumerate() {
            for &i in idx.iter() {
                let cout = widths[stage];
                tensors.insert(format!("features.{i}.weight"), Tensor::ones((cout, cin, 3, 3), DType::F32, &Device::Cpu).unwrap());
                tensors.insert(format!("features.{i}.bias"), Tensor::zeros(cout, DType::F32, &Device::Cpu).unwrap());
                cin = cout;
            }
        }
        candle_core::safetensors::save(&tensors, &path).unwrap();
        let cfg = PerceptualConfig {
            provenance: Provenance::Pretrained { path: path.clone() },
            widths,
            ..PerceptualConfig::default()
        };
        assert!(PerceptualExtractor::new(&cfg, DType::F64, &Device::Cpu).is_ok());
        let wrong = PerceptualConfig { widths: [5, 3, 4], ..cfg };
        assert!(matches!(PerceptualExtractor::new(&wrong, DType::F64, &Device::Cpu), Err(Error::Config(_))));
    }

    #[test]
    fn pooling_matches_candle_forward_and_routes_full_gradient() {
        let x = Tensor::rand(0f64, 1.0, (1, 2, 6, 8), &Device::Cpu).unwrap();
        let ours = max_pool2_ceil(&x).unwrap();
        let theirs = x.max_pool2d(2).unwrap();
        let diff = (ours - theirs).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
        let odd = Tensor::rand(0f64, 1.0, (1, 2, 5, 7), &Device::Cpu).unwrap();
        let r = crate::oracle::gradcheck_input(|t| max_pool2_ceil(t), &odd, 0).unwrap();
        assert!(r.relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn tiny_inputs_keep_three_stages() {
        let cfg = PerceptualConfig::random(1, [2, 2, 2]);
        let ext = PerceptualExtractor::new(&cfg, DType::F64, &Device::Cpu).unwrap();
        let x = Tensor::rand(0f64, 1.0, (1, 3, 2, 3), &Device::Cpu).unwrap();
        let f = ext.features(&x).unwrap();
        assert_eq!(f[1].dims(), &[1, 2, 1, 2]);
        assert_eq!(f[2].dims(), &[1, 2, 1, 1]);
    }
}
