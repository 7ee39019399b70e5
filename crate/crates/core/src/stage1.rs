//! Watermark component exclusion.
//!
//! A five-level U-shaped encoder feeds a shared decoding block, which then
//! splits into a mask branch and a watermark-component branch. The mask
//! branch emits a coarse mask and refines it with a few residual refinement
//! units; the component branch is gated by the refined mask at every decoder
//! level. The background component is derived, not predicted:
//! `Ĉ_b = J − M̂ ∘ Ĉ_w`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{crop, reflect_pad_to_multiple, sigmoid, Conv2d, ConvNormAct, Params, ResBlock};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Stage1Config {
    /// Channel width of each encoder level, finest first.
    pub widths: [usize; 5],
    /// Number of mask refinement units.
    pub refinement_steps: usize,
    /// Ablation: the component branch predicts the watermark-free image
    /// instead of the watermark component.
    #[serde(default)]
    pub predict_clean_image: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            widths: [32, 64, 128, 256, 512],
            refinement_steps: 3,
            predict_clean_image: false,
        }
    }
}

/// Stage-1 predictions for a batch, all `N×C×H×W` at the input size.
#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub mask_logits: Tensor,
    /// `M̂ = sigmoid(mask_logits)`.
    pub mask: Tensor,
    /// `Ĉ_w`; absent when the branch predicts the clean image directly.
    pub watermark_component: Option<Tensor>,
    /// `Ĉ_b`, or the predicted clean image under the clean-image ablation.
    pub background_component: Tensor,
}

impl Stage1Output {
    pub fn predicts_clean_image(&self) -> bool {
        self.watermark_component.is_none()
    }

    pub fn detach(&self) -> Self {
        Self {
            mask_logits: self.mask_logits.detach(),
            mask: self.mask.detach(),
            watermark_component: self.watermark_component.as_ref().map(Tensor::detach),
            background_component: self.background_component.detach(),
        }
    }
}

/// Upsample ×2, project, concatenate the skip, and mix with a residual block.
#[derive(Debug, Clone)]
struct UpStage {
    project: ConvNormAct,
    mix: ResBlock,
}

impl UpStage {
    fn new(p: &Params, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            project: ConvNormAct::new(&p.pp("project"), cin, cout, 3, 1)?,
            mix: ResBlock::new(&p.pp("mix"), 2 * cout, cout)?,
        })
    }

    fn forward(&self, x: &Tensor, skip: &Tensor, gate: Option<&Tensor>) -> Result<Tensor> {
        let (_, _, h, w) = skip.dims4()?;
        let mut up = self.project.forward(&x.upsample_nearest2d(h, w)?)?;
        if let Some(g) = gate {
            up = up.broadcast_mul(g)?;
        }
        self.mix.forward(&Tensor::cat(&[&up, skip], 1)?)
    }
}

#[derive(Debug, Clone)]
struct RefinementUnit {
    body: ConvNormAct,
    out: Conv2d,
}

impl RefinementUnit {
    fn new(p: &Params, width: usize) -> Result<Self> {
        Ok(Self {
            body: ConvNormAct::new(&p.pp("body"), width + 1, width, 3, 1)?,
            out: Conv2d::new(&p.pp("out"), width, 1, 3, 1)?,
        })
    }

    /// Residual update to the mask logits.
    fn forward(&self, features: &Tensor, mask: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.body.forward(&Tensor::cat(&[features, mask], 1)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Net {
    cfg: Stage1Config,
    stem: ConvNormAct,
    level0: ResBlock,
    downs: Vec<(ConvNormAct, ResBlock)>,
    shared: Vec<UpStage>,
    mask_up: Vec<UpStage>,
    mask_head: Conv2d,
    refine: Vec<RefinementUnit>,
    comp_up: Vec<UpStage>,
    comp_head: Conv2d,
}

impl Stage1Net {
    pub fn new(p: &Params, cfg: &Stage1Config) -> Result<Self> {
        let w = cfg.widths;
        if w.iter().any(|&c| c == 0) {
            return Err(Error::config("stage-1 widths must be positive"));
        }
        let downs = (1..5)
            .map(|k| {
                let q = p.pp(format!("enc{k}"));
                Ok((
                    ConvNormAct::new(&q.pp("down"), w[k - 1], w[k], 3, 2)?,
                    ResBlock::new(&q.pp("res"), w[k], w[k])?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let branch = |name: &str| -> Result<Vec<UpStage>> {
            Ok(vec![
                UpStage::new(&p.pp(format!("{name}.up1")), w[2], w[1])?,
                UpStage::new(&p.pp(format!("{name}.up0")), w[1], w[0])?,
            ])
        };
        Ok(Self {
            cfg: cfg.clone(),
            stem: ConvNormAct::new(&p.pp("stem"), 3, w[0], 3, 1)?,
            level0: ResBlock::new(&p.pp("enc0"), w[0], w[0])?,
            downs,
            shared: vec![
                UpStage::new(&p.pp("shared.up3"), w[4], w[3])?,
                UpStage::new(&p.pp("shared.up2"), w[3], w[2])?,
            ],
            mask_up: branch("mask")?,
            mask_head: Conv2d::new(&p.pp("mask.head"), w[0], 1, 3, 1)?,
            refine: (0..cfg.refinement_steps)
                .map(|s| RefinementUnit::new(&p.pp(format!("mask.refine{s}")), w[0]))
                .collect::<Result<Vec<_>>>()?,
            comp_up: branch("component")?,
            comp_head: Conv2d::new(&p.pp("component.head"), w[0], 3, 3, 1)?,
        })
    }

    pub fn config(&self) -> &Stage1Config {
        &self.cfg
    }

    /// Five feature maps, finest first; level `k` is `H/2^k` of the padded
    /// input.
    pub fn encode(&self, j: &Tensor) -> Result<Vec<Tensor>> {
        let mut levels = Vec::with_capacity(5);
        let mut h = self.level0.forward(&self.stem.forward(j)?)?;
        levels.push(h.clone());
        for (down, res) in &self.downs {
            h = res.forward(&down.forward(&h)?)?;
            levels.push(h.clone());
        }
        Ok(levels)
    }

    pub fn forward(&self, j: &Tensor) -> Result<Stage1Output> {
        let (_, c, h, w) = j.dims4()?;
        if c != 3 {
            return Err(Error::contract(format!("stage 1 expects RGB input, got {c} channels")));
        }
        let padded = reflect_pad_to_multiple(j, 16, 16)?;
        let enc = self.encode(&padded)?;
        let d3 = self.shared[0].forward(&enc[4], &enc[3], None)?;
        let d2 = self.shared[1].forward(&d3, &enc[2], None)?;

        let m1 = self.mask_up[0].forward(&d2, &enc[1], None)?;
        let m0 = self.mask_up[1].forward(&m1, &enc[0], None)?;
        let mut logits = self.mask_head.forward(&m0)?;
        for unit in &self.refine {
            let update = unit.forward(&m0, &sigmoid(&logits)?)?;
            logits = (logits + update)?;
        }
        let mask_full = sigmoid(&logits)?;
        let mask_half = mask_full.avg_pool2d(2)?;

        let c1 = self.comp_up[0].forward(&d2, &enc[1], Some(&mask_half))?;
        let c0 = self.comp_up[1].forward(&c1, &enc[0], Some(&mask_full))?;
        let component = sigmoid(&self.comp_head.forward(&c0)?)?;

        let logits = crop(&logits, h, w)?;
        let mask = crop(&mask_full, h, w)?;
        let component = crop(&component, h, w)?;
        if self.cfg.predict_clean_image {
            return Ok(Stage1Output {
                mask_logits: logits,
                mask,
                watermark_component: None,
                background_component: component,
            });
        }
        let background = (j - mask.broadcast_mul(&component)?)?;
        Ok(Stage1Output {
            mask_logits: logits,
            mask,
            watermark_component: Some(component),
            background_component: background,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn tiny() -> Stage1Config {
        Stage1Config {
            widths: [4, 4, 8, 8, 8],
            refinement_steps: 2,
            predict_clean_image: false,
        }
    }

    fn max_abs(t: &Tensor) -> f64 {
        t.abs().unwrap().max_all().unwrap().to_scalar().unwrap()
    }

    #[test]
    fn encoder_halves_five_times() {
        let p = Params::new(0, DType::F64, &Device::Cpu);
        let net = Stage1Net::new(&p, &tiny()).unwrap();
        let x = Tensor::rand(0f64, 1.0, (1, 3, 32, 48), &Device::Cpu).unwrap();
        let levels = net.encode(&x).unwrap();
        let sizes: Vec<_> = levels.iter().map(|t| (t.dim(1).unwrap(), t.dim(2).unwrap(), t.dim(3).unwrap())).collect();
        assert_eq!(sizes, vec![(4, 32, 48), (4, 16, 24), (8, 8, 12), (8, 4, 6), (8, 2, 3)]);
    }

    #[test]
    fn outputs_satisfy_defining_identity() {
        let p = Params::new(1, DType::F64, &Device::Cpu);
        let net = Stage1Net::new(&p, &tiny()).unwrap();
        let j = Tensor::rand(0f64, 1.0, (2, 3, 20, 28), &Device::Cpu).unwrap();
        let out = net.forward(&j).unwrap();
        assert_eq!(out.mask.dims(), &[2, 1, 20, 28]);
        assert_eq!(out.background_component.dims(), j.dims());
        let cw = out.watermark_component.as_ref().unwrap();
        let rebuilt = (&j - out.mask.broadcast_mul(cw).unwrap()).unwrap();
        assert_eq!(max_abs(&(rebuilt - &out.background_component).unwrap()), 0.0);
        let resig = sigmoid(&out.mask_logits).unwrap();
        assert_eq!(max_abs(&(resig - &out.mask).unwrap()), 0.0);
        let lo: f64 = out.mask.min_all().unwrap().to_scalar().unwrap();
        let hi: f64 = out.mask.max_all().unwrap().to_scalar().unwrap();
        assert!(lo > 0.0 && hi < 1.0);
    }

    #[test]
    fn clean_image_ablation_has_no_component() {
        let p = Params::new(1, DType::F64, &Device::Cpu);
        let cfg = Stage1Config { predict_clean_image: true, ..tiny() };
        let net = Stage1Net::new(&p, &cfg).unwrap();
        let j = Tensor::rand(0f64, 1.0, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let out = net.forward(&j).unwrap();
        assert!(out.predicts_clean_image());
        assert_eq!(out.background_component.dims(), j.dims());
    }
}
