//! Reference implementations written as plain scalar loops.
//!
//! Nothing here shares code with the tensor implementations it checks: the
//! losses, metrics, attention and compositing are re-derived element by
//! element, and [`gradcheck_input`] / [`gradcheck_vars`] compare autograd
//! gradients with central finite differences.

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::NonLocalBlock;
use crate::error::{Error, Result};
use crate::imaging::{AlphaMap, BinaryMask, ImageTensor};
use crate::losses::{LossBreakdown, LossWeights};
use crate::perceptual::PerceptualExtractor;

/// Dense `N×C×H×W` array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Nchw {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Nchw {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 4], f: impl Fn(usize, usize, usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(dims);
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for h in 0..dims[2] {
                    for w in 0..dims[3] {
                        let i = out.index(n, c, h, w);
                        out.data[i] = f(n, c, h, w);
                    }
                }
            }
        }
        out
    }

    /// Uniform random values in `[lo, hi)`.
    pub fn random(dims: [usize; 4], seed: u64, lo: f64, hi: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = dims.iter().product();
        Self {
            dims,
            data: (0..count).map(|_| rng.random_range(lo..hi)).collect(),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        Ok(Self {
            dims: [n, c, h, w],
            data: t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
        })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.dims.to_vec(), device)?)
    }

    fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cc, hh, ww] = self.dims;
        ((n * cc + c) * hh + h) * ww + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }
}

// Losses

pub fn l1(x: &Nchw, y: &Nchw) -> f64 {
    assert_eq!(x.dims, y.dims);
    let mut sum = 0.0;
    for k in 0..x.data.len() {
        sum += (x.data[k] - y.data[k]).abs();
    }
    sum / x.data.len() as f64
}

/// `m` has a single channel that applies to every channel of `x`.
pub fn masked_l1(x: &Nchw, y: &Nchw, m: &Nchw) -> f64 {
    assert_eq!(x.dims, y.dims);
    let [n, c, h, w] = x.dims;
    let mut sum = 0.0;
    for a in 0..n {
        for b in 0..c {
            for i in 0..h {
                for j in 0..w {
                    sum += (m.at(a, 0, i, j) * (x.at(a, b, i, j) - y.at(a, b, i, j))).abs();
                }
            }
        }
    }
    sum / x.data.len() as f64
}

pub fn mask_bce(pred: &Nchw, target: &Nchw) -> f64 {
    assert_eq!(pred.dims, target.dims);
    let eps = 1e-7;
    let mut sum = 0.0;
    for k in 0..pred.data.len() {
        let p = pred.data[k].max(eps).min(1.0 - eps);
        let t = target.data[k];
        sum -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    sum / pred.data.len() as f64
}

struct OracleConv {
    cout: usize,
    cin: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// Scalar copy of a [`PerceptualExtractor`].
pub struct OracleExtractor {
    stages: Vec<Vec<OracleConv>>,
    mean: [f64; 3],
    std: [f64; 3],
}

impl OracleExtractor {
    pub fn from_extractor(extractor: &PerceptualExtractor) -> Result<Self> {
        let stages = extractor
            .layers()
            .into_iter()
            .map(|stage| {
                stage
                    .into_iter()
                    .map(|(w, b)| {
                        let (cout, cin, _, _) = w.dims4()?;
                        Ok(OracleConv {
                            cout,
                            cin,
                            weight: w.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
                            bias: b.to_dtype(DType::F64)?.to_vec1()?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stages,
            mean: extractor.config().mean,
            std: extractor.config().std,
        })
    }

    fn conv_relu(conv: &OracleConv, x: &Nchw) -> Nchw {
        let [n, _, h, w] = x.dims;
        let mut out = Nchw::zeros([n, conv.cout, h, w]);
        for a in 0..n {
            for o in 0..conv.cout {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = conv.bias[o];
                        for c in 0..conv.cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (y, z) = (i as i64 + ky as i64 - 1, j as i64 + kx as i64 - 1);
                                    if y < 0 || z < 0 || y >= h as i64 || z >= w as i64 {
                                        continue;
                                    }
                                    let wv = conv.weight[((o * conv.cin + c) * 3 + ky) * 3 + kx];
                                    acc += wv * x.at(a, c, y as usize, z as usize);
                                }
                            }
                        }
                        out.set(a, o, i, j, acc.max(0.0));
                    }
                }
            }
        }
        out
    }

    /// 2×2 max pooling; windows hanging over the edge use only the pixels
    /// that exist.
    fn pool(x: &Nchw) -> Nchw {
        let [n, c, h, w] = x.dims;
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        Nchw::from_fn([n, c, oh, ow], |a, b, i, j| {
            let mut best = f64::NEG_INFINITY;
            for y in 2 * i..(2 * i + 2).min(h) {
                for z in 2 * j..(2 * j + 2).min(w) {
                    best = best.max(x.at(a, b, y, z));
                }
            }
            best
        })
    }

    pub fn features(&self, x: &Nchw) -> Vec<Nchw> {
        let mut h = Nchw::from_fn(x.dims, |a, c, i, j| (x.at(a, c, i, j) - self.mean[c]) / self.std[c]);
        let mut out = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            if s > 0 {
                h = Self::pool(&h);
            }
            for conv in stage {
                h = Self::conv_relu(conv, &h);
            }
            out.push(h.clone());
        }
        out
    }
}

pub fn perceptual(x: &Nchw, y: &Nchw, extractor: &OracleExtractor) -> f64 {
    extractor
        .features(x)
        .iter()
        .zip(extractor.features(y).iter())
        .map(|(a, b)| l1(a, b))
        .sum()
}

/// Everything the total loss consumes, as scalar arrays.
#[derive(Debug, Clone)]
pub struct LossFixture {
    /// Clean background `I`.
    pub background: Nchw,
    /// Opacity `A` (one channel).
    pub alpha: Nchw,
    /// Stage-1 image: `Ĉ_b`, or the clean-image estimate.
    pub stage1_image: Nchw,
    pub predicts_clean_image: bool,
    /// `M̂` (one channel).
    pub mask: Nchw,
    pub restored: Option<Nchw>,
    pub imagined: Option<Nchw>,
    pub fused: Nchw,
}

impl LossFixture {
    /// Random fixture with values in `(0, 1)`; roughly a third of the
    /// opacity entries are zero.
    pub fn random(dims: [usize; 4], seed: u64) -> Self {
        let [n, _, h, w] = dims;
        let raw_alpha = Nchw::random([n, 1, h, w], seed ^ 1, -0.5, 1.0);
        Self {
            background: Nchw::random(dims, seed ^ 2, 0.0, 1.0),
            alpha: Nchw {
                dims: raw_alpha.dims,
                data: raw_alpha.data.iter().map(|&a| a.max(0.0)).collect(),
            },
            stage1_image: Nchw::random(dims, seed ^ 3, 0.0, 1.0),
            predicts_clean_image: false,
            mask: Nchw::random([n, 1, h, w], seed ^ 4, 0.02, 0.98),
            restored: Some(Nchw::random(dims, seed ^ 5, 0.0, 1.0)),
            imagined: Some(Nchw::random(dims, seed ^ 6, 0.0, 1.0)),
            fused: Nchw::random(dims, seed ^ 7, 0.0, 1.0),
        }
    }
}

/// All loss terms from their definitions.
pub fn total_loss(fix: &LossFixture, w: &LossWeights, extractor: &OracleExtractor) -> LossBreakdown {
    let [n, c, h, wd] = fix.background.dims;
    let a = |b: usize, i: usize, j: usize| fix.alpha.at(b, 0, i, j);
    let gate = |keep: &dyn Fn(f64) -> bool| {
        Nchw::from_fn([n, 1, h, wd], |b, _, i, j| {
            let v = a(b, i, j);
            if v > 0.0 && keep(v) {
                1.0
            } else {
                0.0
            }
        })
    };
    let m = gate(&|_| true);
    let opaque = gate(&|v| v > w.alpha_threshold);
    let transparent = gate(&|v| v < w.alpha_threshold);
    let c_b = Nchw::from_fn([n, c, h, wd], |b, k, i, j| (1.0 - a(b, i, j)) * fix.background.at(b, k, i, j));
    let stage1_target = if fix.predicts_clean_image { &fix.background } else { &c_b };

    let l_b = w.lambda1 * masked_l1(&fix.stage1_image, stage1_target, &m)
        + w.lambda2 * perceptual(&fix.stage1_image, stage1_target, extractor);
    let path = |pred: &Nchw, weight: &Nchw| {
        w.lambda1 * (masked_l1(pred, &fix.background, weight) + w.gamma * l1(pred, &fix.background))
            + w.lambda2 * perceptual(pred, &fix.background, extractor)
    };
    let l_r = fix.restored.as_ref().map_or(0.0, |r| path(r, &opaque));
    let l_i = fix.imagined.as_ref().map_or(0.0, |i| path(i, &transparent));
    let l_f = path(&fix.fused, &m);
    let l_m = mask_bce(&fix.mask, &m);
    LossBreakdown {
        l_b,
        l_r,
        l_i,
        l_f,
        l_m,
        total: l_b + l_r + l_i + l_f + w.lambda3 * l_m,
    }
}

// Metrics

fn squared_error_255(x: &ImageTensor, y: &ImageTensor, r: usize, c: usize, k: usize) -> f64 {
    let d = 255.0 * x.get(r, c, k) - 255.0 * y.get(r, c, k);
    d * d
}

pub fn rmse(x: &ImageTensor, y: &ImageTensor) -> f64 {
    let (h, w) = x.dims();
    let mut sum = 0.0;
    for r in 0..h {
        for c in 0..w {
            for k in 0..3 {
                sum += squared_error_255(x, y, r, c, k);
            }
        }
    }
    (sum / (h * w * 3) as f64).sqrt()
}

pub fn psnr(x: &ImageTensor, y: &ImageTensor) -> f64 {
    let e = rmse(x, y);
    let mse = e * e;
    if mse < 1e-10 {
        100.0
    } else {
        (20.0 * (255.0 / e).log10()).min(100.0)
    }
}

pub fn rmse_w(x: &ImageTensor, y: &ImageTensor, mask: &BinaryMask) -> Option<f64> {
    let (h, w) = x.dims();
    let (mut sum, mut count) = (0.0, 0usize);
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                for k in 0..3 {
                    sum += squared_error_255(x, y, r, c, k);
                    count += 1;
                }
            }
        }
    }
    (count > 0).then(|| (sum / count as f64).sqrt())
}

pub fn f1_iou(pred: &ndarray::Array2<f64>, target: &BinaryMask, threshold: f64) -> (f64, f64) {
    let (h, w) = target.dims();
    let mut confusion = [[0usize; 2]; 2];
    for r in 0..h {
        for c in 0..w {
            let p = usize::from(pred[[r, c]] >= threshold);
            let t = usize::from(target.get(r, c));
            confusion[p][t] += 1;
        }
    }
    let (tp, fp, fne) = (confusion[1][1] as f64, confusion[1][0] as f64, confusion[0][1] as f64);
    if tp + fp + fne == 0.0 {
        return (1.0, 1.0);
    }
    (2.0 * tp / (2.0 * tp + fp + fne), tp / (tp + fp + fne))
}

/// SSIM with an explicit 11×11 window sum at every valid position.
pub fn ssim(x: &ImageTensor, y: &ImageTensor) -> f64 {
    const K: usize = 11;
    let sigma = 1.5f64;
    let mut window = [[0.0f64; K]; K];
    let mut total = 0.0;
    for (i, row) in window.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let (h, w) = x.dims();
    let mut acc = 0.0;
    let mut positions = 0usize;
    for k in 0..3 {
        for r in 0..=h - K {
            for c in 0..=w - K {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..K {
                    for j in 0..K {
                        let g = window[i][j] / total;
                        let a = 255.0 * x.get(r + i, c + j, k);
                        let b = 255.0 * y.get(r + i, c + j, k);
                        mx += g * a;
                        my += g * b;
                        sxx += g * a * a;
                        syy += g * b * b;
                        sxy += g * a * b;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                positions += 1;
            }
        }
    }
    acc / positions as f64
}

// Compositing

/// `(J, C_w, C_b)` per pixel.
pub fn composite(background: &ImageTensor, watermark: &ImageTensor, alpha: &AlphaMap) -> (Array3<f64>, Array3<f64>, Array3<f64>) {
    let (h, w) = background.dims();
    let mut j = Array3::zeros((h, w, 3));
    let mut cw = Array3::zeros((h, w, 3));
    let mut cb = Array3::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            let a = alpha.get(r, c);
            for k in 0..3 {
                let fg = a * watermark.get(r, c, k);
                let bg = (1.0 - a) * background.get(r, c, k);
                cw[[r, c, k]] = fg;
                cb[[r, c, k]] = bg;
                j[[r, c, k]] = a * watermark.get(r, c, k) + (1.0 - a) * background.get(r, c, k);
            }
        }
    }
    (j, cw, cb)
}

// Attention

fn projection(conv: &crate::nn::Conv2d, x: &Nchw, n: usize, p: usize) -> Result<Vec<f64>> {
    let w: Vec<f64> = conv.weight().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let b: Vec<f64> = match conv.bias() {
        Some(b) => b.to_dtype(DType::F64)?.to_vec1()?,
        None => vec![0.0; conv.out_channels()],
    };
    let (cin, cout) = (conv.in_channels(), conv.out_channels());
    let width = x.dims[3];
    let (i, j) = (p / width, p % width);
    Ok((0..cout)
        .map(|o| b[o] + (0..cin).map(|c| w[o * cin + c] * x.at(n, c, i, j)).sum::<f64>())
        .collect())
}

/// Affinity rows `softmax_k(θ(x_p)·φ(x_k))`, shape `N×HW×HW`, flattened.
pub fn nonlocal_attention(block: &NonLocalBlock, x: &Nchw) -> Result<Vec<f64>> {
    let [n, _, h, w] = x.dims;
    let hw = h * w;
    let [theta, phi, _, _] = block.projections();
    let mut out = Vec::with_capacity(n * hw * hw);
    for b in 0..n {
        let q: Vec<Vec<f64>> = (0..hw).map(|p| projection(theta, x, b, p)).collect::<Result<_>>()?;
        let k: Vec<Vec<f64>> = (0..hw).map(|p| projection(phi, x, b, p)).collect::<Result<_>>()?;
        for qp in &q {
            let logits: Vec<f64> = k.iter().map(|kp| qp.iter().zip(kp).map(|(u, v)| u * v).sum()).collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / z));
        }
    }
    Ok(out)
}

/// Full non-local block output `x + out(Σ_k a_pk v_k)`.
pub fn nonlocal_forward(block: &NonLocalBlock, x: &Nchw) -> Result<Nchw> {
    let [n, c, h, w] = x.dims;
    let hw = h * w;
    let attn = nonlocal_attention(block, x)?;
    let [_, _, value, out_proj] = block.projections();
    let ow: Vec<f64> = out_proj.weight().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let ob: Vec<f64> = out_proj
        .bias()
        .map(|b| b.to_dtype(DType::F64)?.to_vec1())
        .transpose()?
        .unwrap_or_else(|| vec![0.0; c]);
    let inner = value.out_channels();
    let mut y = x.clone();
    for b in 0..n {
        let v: Vec<Vec<f64>> = (0..hw).map(|p| projection(value, x, b, p)).collect::<Result<_>>()?;
        for p in 0..hw {
            let mixed: Vec<f64> = (0..inner)
                .map(|i| (0..hw).map(|k| attn[(b * hw + p) * hw + k] * v[k][i]).sum())
                .collect();
            for o in 0..c {
                let add = ob[o] + (0..inner).map(|i| ow[o * inner + i] * mixed[i]).sum::<f64>();
                let cur = y.at(b, o, p / w, p % w);
                y.set(b, o, p / w, p % w, cur + add);
            }
        }
    }
    Ok(y)
}

// Gradient checks

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `‖g_analytic − g_numeric‖₂ / max(‖g_analytic‖₂, ‖g_numeric‖₂)`.
    pub relative_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradCheck {
    fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        let mut max_abs: f64 = 0.0;
        for &(a, n) in pairs {
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
            max_abs = max_abs.max((a - n).abs());
        }
        let denom = na.sqrt().max(nn.sqrt()).max(1e-12);
        Self {
            relative_error: diff.sqrt() / denom,
            max_abs_error: max_abs,
            checked: pairs.len(),
        }
    }
}

pub const GRADCHECK_STEP: f64 = 1e-6;

fn projection_weights(shape: &[usize], seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count: usize = shape.iter().product();
    let data: Vec<f64> = (0..count).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(Tensor::from_vec(data, shape.to_vec(), &Device::Cpu)?)
}

fn scalar_of(out: &Tensor, weights: &Tensor) -> Result<Tensor> {
    Ok((out.to_dtype(DType::F64)? * weights)?.sum_all()?)
}

fn value(t: &Tensor) -> Result<f64> {
    Ok(t.to_scalar::<f64>()?)
}

/// Checks `∂/∂x Σ R∘f(x)` for a fixed random `R` against central
/// differences over every element of `x` (which must be `f64`).
pub fn gradcheck_input(f: impl Fn(&Tensor) -> Result<Tensor>, x: &Tensor, seed: u64) -> Result<GradCheck> {
    if x.dtype() != DType::F64 {
        return Err(Error::contract("gradient checks run in f64"));
    }
    let var = Var::from_tensor(x)?;
    let out = f(var.as_tensor())?;
    let weights = projection_weights(out.dims(), seed)?;
    let grads = scalar_of(&out, &weights)?.backward()?;
    let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.to_vec1()?,
        None => vec![0.0; x.elem_count()],
    };
    let base: Vec<f64> = x.flatten_all()?.to_vec1()?;
    let mut pairs = Vec::with_capacity(base.len());
    for (k, &a) in analytic.iter().enumerate() {
        let eval = |delta: f64| -> Result<f64> {
            let mut probe = base.clone();
            probe[k] += delta;
            let t = Tensor::from_vec(probe, x.dims(), x.device())?;
            value(&scalar_of(&f(&t)?, &weights)?)
        };
        let numeric = (eval(GRADCHECK_STEP)? - eval(-GRADCHECK_STEP)?) / (2.0 * GRADCHECK_STEP);
        pairs.push((a, numeric));
    }
    Ok(GradCheck::from_pairs(&pairs))
}

/// Same comparison for trainable variables, probing at most `per_var`
/// evenly spaced entries of each.
pub fn gradcheck_vars(
    f: impl Fn() -> Result<Tensor>,
    vars: &[(String, Var)],
    per_var: usize,
    seed: u64,
) -> Result<GradCheck> {
    let out = f()?;
    let weights = projection_weights(out.dims(), seed)?;
    let grads = scalar_of(&out, &weights)?.backward()?;
    let mut pairs = Vec::new();
    for (_, var) in vars {
        if var.dtype() != DType::F64 {
            return Err(Error::contract("gradient checks run in f64"));
        }
        let original = var.as_tensor().copy()?;
        let base: Vec<f64> = original.flatten_all()?.to_vec1()?;
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; base.len()],
        };
        let stride = base.len().div_ceil(per_var.max(1)).max(1);
        for k in (0..base.len()).step_by(stride) {
            let eval = |delta: f64| -> Result<f64> {
                let mut probe = base.clone();
                probe[k] += delta;
                var.set(&Tensor::from_vec(probe, original.dims(), original.device())?)?;
                value(&scalar_of(&f()?, &weights)?)
            };
            let plus = eval(GRADCHECK_STEP)?;
            let minus = eval(-GRADCHECK_STEP)?;
            pairs.push((analytic[k], (plus - minus) / (2.0 * GRADCHECK_STEP)));
        }
        var.set(&original)?;
    }
    Ok(GradCheck::from_pairs(&pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradcheck_of_square() {
        let x = Nchw::random([1, 1, 2, 3], 0, -1.0, 1.0).to_tensor(&Device::Cpu).unwrap();
        let report = gradcheck_input(|t| Ok(t.sqr()?), &x, 1).unwrap();
        assert!(report.relative_error < 1e-8, "{report:?}");
        assert_eq!(report.checked, 6);
    }

    #[test]
    fn gradcheck_detects_wrong_gradient() {
        let x = Nchw::random([1, 1, 2, 2], 0, 0.5, 1.0).to_tensor(&Device::Cpu).unwrap();
        // Detached factor: autograd sees x·c while the value is x².
        let report = gradcheck_input(|t| Ok((t * t.detach())?), &x, 1).unwrap();
        assert!(report.relative_error > 0.1);
    }

    #[test]
    fn oracle_pool_matches_ceil_semantics() {
        let x = Nchw::from_fn([1, 1, 3, 3], |_, _, i, j| (i * 3 + j) as f64);
        let p = OracleExtractor::pool(&x);
        assert_eq!(p.dims, [1, 1, 2, 2]);
        assert_eq!(p.data, vec![4.0, 5.0, 7.0, 8.0]);
    }
}
