//! Image-quality and mask-accuracy metrics.
//!
//! All image metrics work on the 0–255 scale. Callers that evaluate network
//! outputs quantize predictions to 8 bits first (see
//! [`ImageTensor::quantized`]), which mirrors measuring saved files.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, ImageTensor};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const MASK_THRESHOLD: f64 = 0.5;

fn same_dims(x: &ImageTensor, y: &ImageTensor) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::contract(format!(
            "image sizes differ: {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    Ok(())
}

fn mse255(x: &ImageTensor, y: &ImageTensor) -> f64 {
    let n = x.data().len() as f64;
    x.data()
        .iter()
        .zip(y.data().iter())
        .map(|(a, b)| {
            let d = (a - b) * 255.0;
            d * d
        })
        .sum::<f64>()
        / n
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    same_dims(x, y)?;
    Ok(psnr_from_mse(mse255(x, y)))
}

pub fn rmse(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    same_dims(x, y)?;
    Ok(mse255(x, y).sqrt())
}

/// RMSE over the pixels where `mask` is set, normalized by the masked pixel
/// count times the channel count.
pub fn rmse_w(x: &ImageTensor, y: &ImageTensor, mask: &BinaryMask) -> Result<f64> {
    same_dims(x, y)?;
    if mask.dims() != x.dims() {
        return Err(Error::contract("mask size differs from image size"));
    }
    let count = mask.count();
    if count == 0 {
        return Err(Error::UndefinedMetric("RMSE_w of an empty mask".into()));
    }
    let (h, w) = x.dims();
    let mut sum = 0.0;
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                for ch in 0..3 {
                    let d = (x.get(r, c, ch) - y.get(r, c, ch)) * 255.0;
                    sum += d * d;
                }
            }
        }
    }
    Ok((sum / (count * 3) as f64).sqrt())
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - centre;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering with a symmetric kernel.
fn filter_valid(img: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let k = taps.len();
    let (h, w) = img.dim();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for r in 0..h {
        for c in 0..ow {
            rows[[r, c]] = (0..k).map(|t| taps[t] * img[[r, c + t]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            out[[r, c]] = (0..k).map(|t| taps[t] * rows[[r + t, c]]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), evaluated at
/// every position where the window fits, averaged over positions and
/// channels.
pub fn ssim(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    same_dims(x, y)?;
    let (h, w) = x.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 255.0).powi(2);
    let c2 = (SSIM_K2 * 255.0).powi(2);
    let mut total = 0.0;
    for ch in 0..3 {
        let a = x.data().index_axis(Axis(2), ch).mapv(|v| v * 255.0);
        let b = y.data().index_axis(Axis(2), ch).mapv(|v| v * 255.0);
        let mu_a = filter_valid(&a, &taps);
        let mu_b = filter_valid(&b, &taps);
        let aa = filter_valid(&(&a * &a), &taps);
        let bb = filter_valid(&(&b * &b), &taps);
        let ab = filter_valid(&(&a * &b), &taps);
        let mut sum = 0.0;
        for (((&ma, &mb), (&saa, &sbb)), &sab) in mu_a
            .iter()
            .zip(mu_b.iter())
            .zip(aa.iter().zip(bb.iter()))
            .zip(ab.iter())
        {
            let var_a = saa - ma * ma;
            let var_b = sbb - mb * mb;
            let cov = sab - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

/// Binarizes `pred` at `threshold` (≥) and returns `(F1, IoU)`. Both are 1
/// when prediction and target are empty.
pub fn mask_f1_iou(pred: &Array2<f64>, target: &BinaryMask, threshold: f64) -> Result<(f64, f64)> {
    if pred.dim() != target.dims() {
        return Err(Error::contract("predicted mask size differs from target"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::contract("mask threshold must lie in (0, 1)"));
    }
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target.data().iter()) {
        match (p >= threshold, t != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fne == 0 {
        return Ok((1.0, 1.0));
    }
    let f1 = 2.0 * tp as f64 / (2 * tp + fp + fne) as f64;
    let iou = tp as f64 / (tp + fp + fne) as f64;
    Ok((f1, iou))
}

/// Metrics of a single evaluated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub rmse_w: Option<f64>,
    pub f1: f64,
    pub iou: f64,
    /// Watermark opacity of the sample, when known; used for bucketing.
    #[serde(default)]
    pub opacity: Option<f64>,
}

impl SampleMetrics {
    /// Computes every metric for one prediction. `prediction` should already
    /// be quantized when it comes from a network.
    pub fn compute(
        id: impl Into<String>,
        prediction: &ImageTensor,
        truth: &ImageTensor,
        pred_mask: &Array2<f64>,
        true_mask: &BinaryMask,
        opacity: Option<f64>,
    ) -> Result<Self> {
        let rmse_w = match rmse_w(prediction, truth, true_mask) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        let (f1, iou) = mask_f1_iou(pred_mask, true_mask, MASK_THRESHOLD)?;
        Ok(Self {
            id: id.into(),
            psnr: psnr(prediction, truth)?,
            ssim: ssim(prediction, truth)?,
            rmse: rmse(prediction, truth)?,
            rmse_w,
            f1,
            iou,
            opacity,
        })
    }
}

/// Arithmetic means over samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    /// Mean over samples with a non-empty mask; absent if there are none.
    pub rmse_w: Option<f64>,
    pub f1: f64,
    pub iou: f64,
    pub sample_count: usize,
}

impl MetricsReport {
    /// Aggregates in sample order so the floating-point result is fixed.
    pub fn aggregate(samples: &[SampleMetrics]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::UndefinedMetric("no samples to aggregate".into()));
        }
        let n = samples.len() as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        let weighted: Vec<f64> = samples.iter().filter_map(|s| s.rmse_w).collect();
        Ok(Self {
            psnr: mean(|s| s.psnr),
            ssim: mean(|s| s.ssim),
            rmse: mean(|s| s.rmse),
            rmse_w: (!weighted.is_empty()).then(|| weighted.iter().sum::<f64>() / weighted.len() as f64),
            f1: mean(|s| s.f1),
            iou: mean(|s| s.iou),
            sample_count: samples.len(),
        })
    }
}

/// Mean PSNR of the samples whose opacity falls in `[lower, upper)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpacityBucket {
    pub lower: f64,
    pub upper: f64,
    pub psnr: Option<f64>,
    pub sample_count: usize,
}

pub const OPACITY_BUCKETS: [(f64, f64); 3] = [(0.1, 0.4), (0.4, 0.7), (0.7, 1.0)];

/// PSNR per opacity bucket. A sample of opacity exactly 1 lands in the last
/// bucket.
pub fn opacity_buckets(samples: &[SampleMetrics]) -> Vec<OpacityBucket> {
    OPACITY_BUCKETS
        .iter()
        .enumerate()
        .map(|(k, &(lower, upper))| {
            let last = k + 1 == OPACITY_BUCKETS.len();
            let values: Vec<f64> = samples
                .iter()
                .filter(|s| {
                    s.opacity
                        .is_some_and(|o| o >= lower && (o < upper || (last && o <= upper)))
                })
                .map(|s| s.psnr)
                .collect();
            OpacityBucket {
                lower,
                upper,
                psnr: (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64),
                sample_count: values.len(),
            }
        })
        .collect()
}

/// Writes the per-sample CSV (id, psnr, ssim, rmse, rmse_w, f1, iou).
pub fn write_samples_csv(samples: &[SampleMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    out.write_record(["id", "psnr", "ssim", "rmse", "rmse_w", "f1", "iou"])
        .map_err(|e| csv_error(path, e))?;
    for s in samples {
        out.write_record([
            s.id.clone(),
            format!("{:.6}", s.psnr),
            format!("{:.6}", s.ssim),
            format!("{:.6}", s.rmse),
            s.rmse_w.map(|v| format!("{v:.6}")).unwrap_or_default(),
            format!("{:.6}", s.f1),
            format!("{:.6}", s.iou),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Plain-text PSNR table in the bucket layout.
pub fn format_bucket_table(buckets: &[OpacityBucket]) -> String {
    let mut out = String::from("opacity      samples  PSNR\n");
    for b in buckets {
        let psnr = b.psnr.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
        out.push_str(&format!("[{:.1},{:.1})  {:>7}  {psnr}\n", b.lower, b.upper, b.sample_count));
    }
    out
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n").map_err(|e| Error::io(path, e))
}
