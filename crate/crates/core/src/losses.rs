//! Training objective.
//!
//! Every norm is mean-normalized over all elements of the compared tensors,
//! so the weights keep their meaning across resolutions. The opacity split
//! uses strict inequalities: a pixel with `A == α` only receives the
//! γ-weighted full-image term.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perceptual::PerceptualExtractor;
use crate::stage1::Stage1Output;
use crate::stage2::Stage2Output;

/// Clamp applied to predicted masks before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub gamma: f64,
    pub alpha_threshold: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 2.0,
            lambda2: 1.0,
            lambda3: 3.0,
            gamma: 1.5,
            alpha_threshold: 0.75,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda1, self.lambda2, self.lambda3, self.gamma];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if !(self.alpha_threshold > 0.0 && self.alpha_threshold < 1.0) {
            return Err(Error::config("alpha threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

fn check_shapes(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::contract(format!(
            "loss operands differ in shape: {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_shapes(x, y)?;
    Ok((x - y)?.abs()?.mean_all()?)
}

/// Mean of `|M∘(X−Y)|` over all elements of `X`; `M` broadcasts over
/// channels.
pub fn masked_l1(x: &Tensor, y: &Tensor, m: &Tensor) -> Result<Tensor> {
    check_shapes(x, y)?;
    let diff = (x - y)?;
    let weighted = diff
        .broadcast_mul(m)
        .map_err(|e| Error::contract(format!("mask does not broadcast: {e}")))?;
    if weighted.dims() != x.dims() {
        return Err(Error::contract("mask broadcasts beyond the image shape"));
    }
    Ok(weighted.abs()?.mean_all()?)
}

/// `Σ_k mean|Φ_k(X) − Φ_k(Y)|` over the extractor's three stages.
pub fn perceptual(x: &Tensor, y: &Tensor, extractor: &PerceptualExtractor) -> Result<Tensor> {
    check_shapes(x, y)?;
    let fx = extractor.features(x)?;
    let fy = extractor.features(y)?;
    feature_distance(&fx, &fy)
}

fn feature_distance(fx: &[Tensor], fy: &[Tensor]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (a, b) in fx.iter().zip(fy.iter()) {
        let term = (a - b)?.abs()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::contract("extractor produced no features"))
}

/// Binary cross-entropy, mean over pixels, with the prediction clamped to
/// `[ε, 1−ε]`.
pub fn mask_bce(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_shapes(pred, target)?;
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = target.mul(&p.log()?)?;
    let neg = (1.0 - target)?.mul(&(1.0 - &p)?.log()?)?;
    Ok((pos + neg)?.neg()?.mean_all()?)
}

/// Ground truth for one batch, `N×C×H×W`.
#[derive(Debug, Clone)]
pub struct LossTargets {
    /// Clean background `I` (also the target of both stage-2 paths).
    pub background: Tensor,
    /// Opacity `A`, `N×1×H×W`.
    pub alpha: Tensor,
    /// `M = A > 0`, `N×1×H×W`.
    pub mask: Tensor,
    /// `C_b = (1−A)∘I`.
    pub background_component: Tensor,
}

impl LossTargets {
    /// Builds targets from `I` (`N×3×H×W`) and `A` (`N×1×H×W`).
    pub fn from_background_and_alpha(background: &Tensor, alpha: &Tensor) -> Result<Self> {
        let (n, _, h, w) = background.dims4()?;
        if alpha.dims() != [n, 1, h, w] {
            return Err(Error::contract(format!(
                "opacity ground truth must be {:?}, got {:?}",
                [n, 1, h, w],
                alpha.dims()
            )));
        }
        let mask = alpha.gt(0.0)?.to_dtype(alpha.dtype())?;
        let background_component = background.broadcast_mul(&(1.0 - alpha)?)?;
        Ok(Self {
            background: background.clone(),
            alpha: alpha.clone(),
            mask,
            background_component,
        })
    }

    /// `M∘(A > α)`.
    pub fn opaque_weight(&self, alpha_threshold: f64) -> Result<Tensor> {
        let above = self.alpha.gt(alpha_threshold)?.to_dtype(self.alpha.dtype())?;
        Ok(self.mask.mul(&above)?)
    }

    /// `M∘(A < α)`.
    pub fn transparent_weight(&self, alpha_threshold: f64) -> Result<Tensor> {
        let below = self.alpha.lt(alpha_threshold)?.to_dtype(self.alpha.dtype())?;
        Ok(self.mask.mul(&below)?)
    }
}

/// Scalar value of each loss term, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_b")]
    pub l_b: f64,
    #[serde(rename = "L_r")]
    pub l_r: f64,
    #[serde(rename = "L_i")]
    pub l_i: f64,
    #[serde(rename = "L_f")]
    pub l_f: f64,
    #[serde(rename = "L_m")]
    pub l_m: f64,
    #[serde(rename = "L")]
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_b, self.l_r, self.l_i, self.l_f, self.l_m, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Differentiable total plus its breakdown. Terms that were not computed
/// are `None` and log as 0.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: Tensor,
    pub l_b: Tensor,
    pub l_r: Option<Tensor>,
    pub l_i: Option<Tensor>,
    pub l_f: Option<Tensor>,
    pub l_m: Tensor,
}

impl TotalLoss {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossBreakdown {
            l_b: v(&self.l_b)?,
            l_r: self.l_r.as_ref().map(v).transpose()?.unwrap_or(0.0),
            l_i: self.l_i.as_ref().map(v).transpose()?.unwrap_or(0.0),
            l_f: self.l_f.as_ref().map(v).transpose()?.unwrap_or(0.0),
            l_m: v(&self.l_m)?,
            total: v(&self.total)?,
        })
    }
}

/// `λ1·[ℓ1^msk(X, Y, W) + γ·ℓ1(X, Y)] + λ2·ℓ^vgg`, given precomputed features.
fn image_term(
    x: &Tensor,
    y: &Tensor,
    weight: &Tensor,
    gamma: f64,
    fx: &[Tensor],
    fy: &[Tensor],
    w: &LossWeights,
) -> Result<Tensor> {
    let pixel = (masked_l1(x, y, weight)? + (l1(x, y)? * gamma)?)?;
    Ok(((pixel * w.lambda1)? + (feature_distance(fx, fy)? * w.lambda2)?)?)
}

/// Assembles `L = L_b + L_r + L_i + L_f + λ3·L_m`.
///
/// Terms for a disabled stage-2 path are absent. Under the clean-image
/// ablation of stage 1, `L_b` compares the stage-1 image with `I` instead of
/// `C_b`.
pub fn total_loss(
    targets: &LossTargets,
    s1: &Stage1Output,
    s2: &Stage2Output,
    w: &LossWeights,
    extractor: &PerceptualExtractor,
) -> Result<TotalLoss> {
    w.validate()?;
    let n = targets.background.dim(0)?;

    // One extractor pass over every prediction, one over the two targets.
    let mut preds = vec![s1.background_component.clone()];
    if let Some(r) = &s2.restored {
        preds.push(r.clone());
    }
    if let Some(i) = &s2.imagined {
        preds.push(i.clone());
    }
    preds.push(s2.fused.clone());
    let pred_feats = extractor.features(&Tensor::cat(&preds, 0)?)?;
    let stage1_target = if s1.predicts_clean_image() {
        &targets.background
    } else {
        &targets.background_component
    };
    let target_feats: Vec<Tensor> = extractor
        .features(&Tensor::cat(&[stage1_target, &targets.background], 0)?.detach())?
        .into_iter()
        .map(|t| t.detach())
        .collect();
    let slice = |feats: &[Tensor], k: usize| -> Result<Vec<Tensor>> {
        feats.iter().map(|f| Ok(f.narrow(0, k * n, n)?)).collect()
    };
    let t_stage1 = slice(&target_feats, 0)?;
    let t_clean = slice(&target_feats, 1)?;

    let mut k = 0;
    let l_b = image_term(
        &s1.background_component,
        stage1_target,
        &targets.mask,
        0.0,
        &slice(&pred_feats, k)?,
        &t_stage1,
        w,
    )?;
    k += 1;
    let l_r = match &s2.restored {
        Some(r) => {
            let term = image_term(
                r,
                &targets.background,
                &targets.opaque_weight(w.alpha_threshold)?,
                w.gamma,
                &slice(&pred_feats, k)?,
                &t_clean,
                w,
            )?;
            k += 1;
            Some(term)
        }
        None => None,
    };
    let l_i = match &s2.imagined {
        Some(i) => {
            let term = image_term(
                i,
                &targets.background,
                &targets.transparent_weight(w.alpha_threshold)?,
                w.gamma,
                &slice(&pred_feats, k)?,
                &t_clean,
                w,
            )?;
            k += 1;
            Some(term)
        }
        None => None,
    };
    let l_f = image_term(
        &s2.fused,
        &targets.background,
        &targets.mask,
        w.gamma,
        &slice(&pred_feats, k)?,
        &t_clean,
        w,
    )?;
    let l_m = mask_bce(&s1.mask, &targets.mask)?;

    let mut total = (&l_b + &l_f)?;
    if let Some(r) = &l_r {
        total = (total + r)?;
    }
    if let Some(i) = &l_i {
        total = (total + i)?;
    }
    total = (total + (&l_m * w.lambda3)?)?;
    Ok(TotalLoss {
        total,
        l_b,
        l_r,
        l_i,
        l_f: Some(l_f),
        l_m,
    })
}

/// `L_b + λ3·L_m`, the objective of stage 1 trained on its own.
pub fn stage1_loss(
    targets: &LossTargets,
    s1: &Stage1Output,
    w: &LossWeights,
    extractor: &PerceptualExtractor,
) -> Result<TotalLoss> {
    w.validate()?;
    let target = if s1.predicts_clean_image() {
        &targets.background
    } else {
        &targets.background_component
    };
    let fx = extractor.features(&s1.background_component)?;
    let fy: Vec<Tensor> = extractor.features(&target.detach())?.into_iter().map(|t| t.detach()).collect();
    let l_b = image_term(&s1.background_component, target, &targets.mask, 0.0, &fx, &fy, w)?;
    let l_m = mask_bce(&s1.mask, &targets.mask)?;
    Ok(TotalLoss {
        total: (&l_b + (&l_m * w.lambda3)?)?,
        l_b,
        l_r: None,
        l_i: None,
        l_f: None,
        l_m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn scalar(x: Tensor) -> f64 {
        x.to_scalar().unwrap()
    }

    #[test]
    fn l1_basic_cases() {
        let x = Tensor::rand(0f64, 1.0, (1, 3, 2, 2), &Device::Cpu).unwrap();
        assert_eq!(scalar(l1(&x, &x).unwrap()), 0.0);
        let y = (&x + 0.5).unwrap();
        assert!((scalar(l1(&x, &y).unwrap()) - 0.5).abs() < 1e-12);
        let bad = Tensor::zeros((1, 3, 2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(l1(&x, &bad).is_err());
    }

    #[test]
    fn masked_l1_reduces_to_l1() {
        let x = Tensor::rand(0f64, 1.0, (2, 3, 2, 2), &Device::Cpu).unwrap();
        let y = Tensor::rand(0f64, 1.0, (2, 3, 2, 2), &Device::Cpu).unwrap();
        let zeros = Tensor::zeros((2, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let ones = Tensor::ones((2, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(scalar(masked_l1(&x, &y, &zeros).unwrap()), 0.0);
        let a = scalar(masked_l1(&x, &y, &ones).unwrap());
        let b = scalar(l1(&x, &y).unwrap());
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn bce_limits() {
        let target = t(&[0.0, 1.0, 1.0, 0.0], &[1, 1, 2, 2]);
        assert!(scalar(mask_bce(&target, &target).unwrap()) <= 1e-6);
        let half = Tensor::full(0.5f64, (1, 1, 2, 2), &Device::Cpu).unwrap();
        assert!((scalar(mask_bce(&half, &target).unwrap()) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn opacity_weights_split_mask() {
        let alpha = t(&[0.0, 0.3, 0.75, 1.0], &[1, 1, 2, 2]);
        let bg = Tensor::zeros((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let targets = LossTargets::from_background_and_alpha(&bg, &alpha).unwrap();
        let hi: Vec<f64> = targets.opaque_weight(0.75).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let lo: Vec<f64> = targets.transparent_weight(0.75).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(hi, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(lo, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn fully_opaque_alpha_routes_everything_to_restoration_weight() {
        let alpha = Tensor::ones((1, 1, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let bg = Tensor::zeros((1, 3, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let targets = LossTargets::from_background_and_alpha(&bg, &alpha).unwrap();
        let hi = targets.opaque_weight(0.75).unwrap();
        let diff: f64 = (hi - &targets.mask).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(diff, 0.0);
        let lo: f64 = targets.transparent_weight(0.75).unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert_eq!(lo, 0.0);
    }

    #[test]
    fn invalid_weights_rejected() {
        let mut w = LossWeights::default();
        assert!(w.validate().is_ok());
        w.alpha_threshold = 1.0;
        assert!(w.validate().is_err());
        w = LossWeights { lambda2: -1.0, ..LossWeights::default() };
        assert!(w.validate().is_err());
    }
}
