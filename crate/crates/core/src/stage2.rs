//! Dual-path background restoration.
//!
//! The restoration path sees `[M̂, Ĉ_b]` and recovers the background from the
//! attenuated content under the watermark. The imagination path sees
//! `[(1−M̂)∘J, M̂]`, so the watermark region is hidden, and has to fill it
//! from the surrounding context. A non-local fusion head merges both into the
//! final image.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::blocks::{BackboneBlock, BlockKind, GlciConfig, GlciVariant, NonLocalBlock};
use crate::error::{Error, Result};
use crate::nn::{crop, reflect_pad_to_multiple, sigmoid, Conv2d, ConvNormAct, Params};
use crate::stage1::Stage1Output;

/// Which restoration sub-networks are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PathMode {
    #[default]
    Dual,
    RestorationOnly,
    ImaginationOnly,
}

impl PathMode {
    pub fn has_restoration(self) -> bool {
        self != PathMode::ImaginationOnly
    }

    pub fn has_imagination(self) -> bool {
        self != PathMode::RestorationOnly
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Stage2Config {
    /// Width of the full-resolution stem; the bottleneck runs at 4× this.
    pub base_width: usize,
    /// Number of backbone blocks at 1/8 resolution.
    pub blocks: usize,
    pub local_block: (usize, usize),
    pub global_grid: (usize, usize),
    pub hidden_ratio: usize,
    #[serde(default)]
    pub glci_variant: GlciVariant,
    #[serde(default)]
    pub block_kind: BlockKind,
    #[serde(default)]
    pub paths: PathMode,
    pub fusion_width: usize,
    /// Number of stride-2 stages before the non-local block.
    pub fusion_downsample: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            base_width: 32,
            blocks: 6,
            local_block: (8, 8),
            global_grid: (8, 8),
            hidden_ratio: 2,
            glci_variant: GlciVariant::Full,
            block_kind: BlockKind::Glci,
            paths: PathMode::Dual,
            fusion_width: 32,
            fusion_downsample: 2,
        }
    }
}

impl Stage2Config {
    pub fn bottleneck_glci(&self) -> GlciConfig {
        GlciConfig {
            channels: 4 * self.base_width,
            local_block: self.local_block,
            global_grid: self.global_grid,
            hidden_ratio: self.hidden_ratio,
            variant: self.glci_variant,
        }
    }
}

/// Stage-2 predictions; images are unclamped so losses see raw values.
#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub restored: Option<Tensor>,
    pub imagined: Option<Tensor>,
    pub fused: Tensor,
}

impl Stage2Output {
    /// Final image clamped to `[0, 1]`.
    pub fn fused_clamped(&self) -> Result<Tensor> {
        Ok(self.fused.clamp(0.0, 1.0)?)
    }
}

/// Encoder–bottleneck–decoder sub-network predicting a residual over a base
/// image.
#[derive(Debug, Clone)]
pub struct RestorationBackbone {
    stem: ConvNormAct,
    downs: Vec<ConvNormAct>,
    blocks: Vec<BackboneBlock>,
    ups: Vec<ConvNormAct>,
    refine: ConvNormAct,
    head: Conv2d,
}

impl RestorationBackbone {
    pub fn new(p: &Params, cfg: &Stage2Config, in_channels: usize) -> Result<Self> {
        let c = cfg.base_width;
        let widths = [c, 2 * c, 4 * c, 4 * c];
        let glci = cfg.bottleneck_glci();
        Ok(Self {
            stem: ConvNormAct::new(&p.pp("stem"), in_channels, c, 3, 1)?,
            downs: (0..3)
                .map(|i| ConvNormAct::new(&p.pp(format!("down{i}")), widths[i], widths[i + 1], 3, 2))
                .collect::<Result<_>>()?,
            blocks: (0..cfg.blocks)
                .map(|i| BackboneBlock::new(&p.pp(format!("block{i}")), cfg.block_kind, &glci))
                .collect::<Result<_>>()?,
            ups: (0..3)
                .map(|i| ConvNormAct::new(&p.pp(format!("up{i}")), widths[3 - i], widths[2 - i], 3, 1))
                .collect::<Result<_>>()?,
            refine: ConvNormAct::new(&p.pp("refine"), c + in_channels, c, 3, 1)?,
            head: Conv2d::new(&p.pp("head"), c, 3, 3, 1)?,
        })
    }

    /// `input` must be `/8`-divisible; returns `base + residual`.
    fn forward(&self, input: &Tensor, base: &Tensor) -> Result<Tensor> {
        let mut h = self.stem.forward(input)?;
        let mut sizes = Vec::with_capacity(3);
        for down in &self.downs {
            sizes.push((h.dim(2)?, h.dim(3)?));
            h = down.forward(&h)?;
        }
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        for (up, &(sh, sw)) in self.ups.iter().zip(sizes.iter().rev()) {
            h = up.forward(&h.upsample_nearest2d(sh, sw)?)?;
        }
        let h = self.refine.forward(&Tensor::cat(&[&h, input], 1)?)?;
        Ok((base + self.head.forward(&h)?)?)
    }

    /// Runs on an arbitrary-size input by reflection padding to `/8`.
    pub fn run(&self, input: &Tensor, base: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = input.dims4()?;
        let input_p = reflect_pad_to_multiple(input, 8, 8)?;
        let base_p = reflect_pad_to_multiple(base, 8, 8)?;
        crop(&self.forward(&input_p, &base_p)?, h, w)
    }
}

/// Non-local fusion of the two path outputs.
#[derive(Debug, Clone)]
pub struct FusionHead {
    embed: ConvNormAct,
    downs: Vec<ConvNormAct>,
    attention: NonLocalBlock,
    merge: ConvNormAct,
    head: Conv2d,
}

impl FusionHead {
    pub fn new(p: &Params, cfg: &Stage2Config) -> Result<Self> {
        let f = cfg.fusion_width;
        Ok(Self {
            embed: ConvNormAct::new(&p.pp("embed"), 7, f, 3, 1)?,
            downs: (0..cfg.fusion_downsample)
                .map(|i| ConvNormAct::new(&p.pp(format!("down{i}")), f, f, 3, 2))
                .collect::<Result<_>>()?,
            attention: NonLocalBlock::new(&p.pp("nonlocal"), f)?,
            merge: ConvNormAct::new(&p.pp("merge"), 2 * f, f, 3, 1)?,
            head: Conv2d::new(&p.pp("head"), f, 4, 3, 1)?,
        })
    }

    pub fn attention_block(&self) -> &NonLocalBlock {
        &self.attention
    }

    /// `Î = w∘Î_r + (1−w)∘Î_i + r` with a learned per-pixel blend `w` and
    /// residual `r`.
    pub fn forward(&self, restored: &Tensor, imagined: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = restored.dims4()?;
        let m = 1usize << self.downs.len();
        let x = reflect_pad_to_multiple(&Tensor::cat(&[restored, imagined, mask], 1)?, m, m)?;
        let (ph, pw) = (x.dim(2)?, x.dim(3)?);
        let embedded = self.embed.forward(&x)?;
        let mut low = embedded.clone();
        for down in &self.downs {
            low = down.forward(&low)?;
        }
        let low = self.attention.forward(&low)?;
        let up = low.upsample_nearest2d(ph, pw)?;
        let out = self.head.forward(&self.merge.forward(&Tensor::cat(&[&up, &embedded], 1)?)?)?;
        let out = crop(&out, h, w)?;
        let blend = sigmoid(&out.narrow(1, 0, 1)?)?;
        let residual = out.narrow(1, 1, 3)?;
        let mixed = (restored.broadcast_mul(&blend)? + imagined.broadcast_mul(&(1.0 - &blend)?)?)?;
        Ok((mixed + residual)?)
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Net {
    cfg: Stage2Config,
    restoration: Option<RestorationBackbone>,
    imagination: Option<RestorationBackbone>,
    fusion: FusionHead,
}

impl Stage2Net {
    pub fn new(p: &Params, cfg: &Stage2Config) -> Result<Self> {
        if cfg.base_width == 0 || cfg.fusion_width == 0 {
            return Err(Error::config("stage-2 widths must be positive"));
        }
        Ok(Self {
            cfg: cfg.clone(),
            restoration: if cfg.paths.has_restoration() {
                Some(RestorationBackbone::new(&p.pp("restore"), cfg, 4)?)
            } else {
                None
            },
            imagination: if cfg.paths.has_imagination() {
                Some(RestorationBackbone::new(&p.pp("imagine"), cfg, 4)?)
            } else {
                None
            },
            fusion: FusionHead::new(&p.pp("fusion"), cfg)?,
        })
    }

    pub fn config(&self) -> &Stage2Config {
        &self.cfg
    }

    pub fn fusion(&self) -> &FusionHead {
        &self.fusion
    }

    /// Content restoration from `[M̂, Ĉ_b]`.
    pub fn restore_path(&self, mask: &Tensor, background_component: &Tensor) -> Result<Tensor> {
        let net = self
            .restoration
            .as_ref()
            .ok_or_else(|| Error::contract("restoration path disabled"))?;
        check_same_hw(mask, background_component)?;
        let input = Tensor::cat(&[mask, background_component], 1)?;
        net.run(&input, background_component)
    }

    /// Masked input `[(1−M̂)∘J, M̂]` seen by the imagination path.
    pub fn imagination_input(j: &Tensor, mask: &Tensor) -> Result<Tensor> {
        check_same_hw(mask, j)?;
        let hidden = j.broadcast_mul(&(1.0 - mask)?)?;
        Ok(Tensor::cat(&[&hidden, mask], 1)?)
    }

    /// Content imagination from the masked image.
    pub fn imagine_path(&self, j: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let net = self
            .imagination
            .as_ref()
            .ok_or_else(|| Error::contract("imagination path disabled"))?;
        let input = Self::imagination_input(j, mask)?;
        let base = input.narrow(1, 0, 3)?;
        net.run(&input, &base)
    }

    pub fn fuse(&self, restored: &Tensor, imagined: &Tensor, mask: &Tensor) -> Result<Tensor> {
        check_same_hw(restored, imagined)?;
        check_same_hw(restored, mask)?;
        self.fusion.forward(restored, imagined, mask)
    }

    pub fn forward(&self, j: &Tensor, stage1: &Stage1Output) -> Result<Stage2Output> {
        let mask = &stage1.mask;
        let restored = if self.cfg.paths.has_restoration() {
            Some(self.restore_path(mask, &stage1.background_component)?)
        } else {
            None
        };
        let imagined = if self.cfg.paths.has_imagination() {
            Some(self.imagine_path(j, mask)?)
        } else {
            None
        };
        let (r, i) = match (&restored, &imagined) {
            (Some(r), Some(i)) => (r, i),
            (Some(r), None) => (r, r),
            (None, Some(i)) => (i, i),
            (None, None) => unreachable!("at least one path is always active"),
        };
        let fused = self.fuse(r, i, mask)?;
        Ok(Stage2Output {
            restored,
            imagined,
            fused,
        })
    }
}

fn check_same_hw(a: &Tensor, b: &Tensor) -> Result<()> {
    let (n1, _, h1, w1) = a.dims4()?;
    let (n2, _, h2, w2) = b.dims4()?;
    if (n1, h1, w1) != (n2, h2, w2) {
        return Err(Error::contract(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    pub(crate) fn tiny() -> Stage2Config {
        Stage2Config {
            base_width: 2,
            blocks: 1,
            local_block: (2, 2),
            global_grid: (2, 2),
            hidden_ratio: 2,
            fusion_width: 4,
            ..Stage2Config::default()
        }
    }

    fn stage1_stub(n: usize, h: usize, w: usize, mask_value: f64) -> Stage1Output {
        let dev = Device::Cpu;
        let mask = Tensor::full(mask_value, (n, 1, h, w), &dev).unwrap();
        Stage1Output {
            mask_logits: mask.clone(),
            mask,
            watermark_component: None,
            background_component: Tensor::rand(0f64, 1.0, (n, 3, h, w), &dev).unwrap(),
        }
    }

    #[test]
    fn dual_path_shapes() {
        let p = Params::new(0, DType::F64, &Device::Cpu);
        let net = Stage2Net::new(&p, &tiny()).unwrap();
        let j = Tensor::rand(0f64, 1.0, (2, 3, 20, 12), &Device::Cpu).unwrap();
        let out = net.forward(&j, &stage1_stub(2, 20, 12, 0.3)).unwrap();
        assert_eq!(out.fused.dims(), j.dims());
        assert_eq!(out.restored.unwrap().dims(), j.dims());
        assert_eq!(out.imagined.unwrap().dims(), j.dims());
    }

    #[test]
    fn single_path_ablations_flag_missing_output() {
        for (mode, has_r, has_i) in [
            (PathMode::RestorationOnly, true, false),
            (PathMode::ImaginationOnly, false, true),
        ] {
            let p = Params::new(0, DType::F64, &Device::Cpu);
            let net = Stage2Net::new(&p, &Stage2Config { paths: mode, ..tiny() }).unwrap();
            let j = Tensor::rand(0f64, 1.0, (1, 3, 16, 16), &Device::Cpu).unwrap();
            let out = net.forward(&j, &stage1_stub(1, 16, 16, 0.5)).unwrap();
            assert_eq!(out.restored.is_some(), has_r);
            assert_eq!(out.imagined.is_some(), has_i);
            assert_eq!(p.vars_with_prefix("restore").is_empty(), !has_r);
            assert_eq!(p.vars_with_prefix("imagine").is_empty(), !has_i);
        }
    }

    #[test]
    fn imagination_input_hides_the_mask_region() {
        let j = Tensor::rand(0f64, 1.0, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let zero = Tensor::zeros((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let input = Stage2Net::imagination_input(&j, &zero).unwrap();
        let diff: f64 = (input.narrow(1, 0, 3).unwrap() - &j).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(diff, 0.0);
        let one = Tensor::ones((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let input = Stage2Net::imagination_input(&j, &one).unwrap();
        let peak: f64 = input.narrow(1, 0, 3).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(peak, 0.0);
    }

    #[test]
    fn fully_masked_imagination_is_finite() {
        let p = Params::new(3, DType::F64, &Device::Cpu);
        let net = Stage2Net::new(&p, &tiny()).unwrap();
        let j = Tensor::rand(0f64, 1.0, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let one = Tensor::ones((1, 1, 16, 16), DType::F64, &Device::Cpu).unwrap();
        let out = net.imagine_path(&j, &one).unwrap();
        let s: f64 = out.sum_all().unwrap().to_scalar().unwrap();
        assert!(s.is_finite());
    }

    #[test]
    fn ffc_variant_builds() {
        let p = Params::new(3, DType::F64, &Device::Cpu);
        let net = Stage2Net::new(&p, &Stage2Config { block_kind: BlockKind::Ffc, ..tiny() }).unwrap();
        let j = Tensor::rand(0f64, 1.0, (1, 3, 16, 16), &Device::Cpu).unwrap();
        assert!(net.forward(&j, &stage1_stub(1, 16, 16, 0.2)).is_ok());
        assert!(p.all_vars().iter().any(|(k, _)| k.contains("g2g")));
    }
}
