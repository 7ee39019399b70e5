//! Oracle and property checks that need no trained weights.
//!
//! Each check returns a [`CheckOutcome`] carrying the measured error next to
//! its tolerance, so the same functions back the `selftest` command and the
//! acceptance suite.

use std::collections::BTreeSet;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{ModelPreset, TrainConfig};
use super::train::{build, train_with};
use crate::blocks::{global_partition, local_partition, Glci, GlciConfig, GlobalMlp, LocalMlp, NonLocalBlock, Scse, SpectralTransform};
use crate::error::Result;
use crate::imaging::{BinaryMask, ImageTensor};
use crate::losses::{self, LossTargets, LossWeights};
use crate::metrics;
use crate::model::ModelConfig;
use crate::nn::Params;
use crate::oracle::{self, gradcheck_input, gradcheck_vars, LossFixture, Nchw, OracleExtractor};
use crate::perceptual::{PerceptualConfig, PerceptualExtractor};
use crate::stage1::Stage1Output;
use crate::stage2::{Stage2Net, Stage2Output};
use crate::synthesis::{procedural, sample_rng, synthesize_sample, transform_watermark, Sample, SynthesisConfig, WatermarkAsset};

pub const COMPOSITE_TOLERANCE: f64 = 1e-6;
pub const LOSS_RELATIVE_TOLERANCE: f64 = 1e-6;
pub const METRIC_TOLERANCE: f64 = 1e-6;
pub const SSIM_TOLERANCE: f64 = 1e-5;
pub const GRADIENT_TOLERANCE: f64 = 1e-3;

/// Result of one check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{} {}: {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

/// Runs `f` and turns errors into failures.
pub fn run_check(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Sizes of the self-test workloads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelftestOptions {
    pub compositing_samples: usize,
    pub loss_fixtures: usize,
    pub metric_fixtures: usize,
    pub seed: u64,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            compositing_samples: 1000,
            loss_fixtures: 50,
            metric_fixtures: 50,
            seed: 0,
        }
    }
}

pub fn run_selftest(opts: &SelftestOptions) -> Vec<CheckOutcome> {
    vec![
        compositing_identity(opts.compositing_samples, opts.seed),
        loss_oracle(opts.loss_fixtures, opts.seed),
        metric_oracle(opts.metric_fixtures, opts.seed),
        gradient_suite(opts.seed),
        receptive_field_probes(opts.seed),
        partition_example(),
        determinism(opts.seed),
    ]
}

/// Synthetic training samples with procedural backgrounds and logos.
pub fn synthetic_samples(count: usize, size: usize, opacity: (f64, f64), seed: u64) -> Result<Vec<(String, Sample)>> {
    let config = SynthesisConfig {
        canvas: (size, size),
        ..SynthesisConfig::with_opacity(opacity.0, opacity.1)
    };
    let logo = (size / 2).max(8);
    let assets: Vec<WatermarkAsset> = (0..8).map(|i| procedural::watermark(seed, i, logo, logo)).collect();
    (0..count)
        .map(|i| {
            let bg = procedural::background(seed, i as u64, size, size);
            let (_, s) = synthesize_sample(&bg, &assets, &config, seed, i as u64)?;
            Ok((format!("{i:06}"), s))
        })
        .collect()
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(Array3::from_shape_fn((h, w, 3), |_| rng.random_range(0.0..=1.0))).expect("values in range")
}

fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `J = A∘W' + (1−A)∘I`, `C_w + C_b = J` and `M = (A > 0)` on random
/// samples with random logos, sizes and transforms.
pub fn compositing_identity(samples: usize, seed: u64) -> CheckOutcome {
    run_check("compositing identity", || {
        let canvas = (48, 64);
        let config = SynthesisConfig {
            canvas,
            ..SynthesisConfig::pw()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let assets: Vec<WatermarkAsset> = (0..6)
            .map(|i| procedural::watermark(seed, i, rng.random_range(12..40), rng.random_range(12..40)))
            .collect();
        let mut worst: f64 = 0.0;
        let mut mask_errors = 0usize;
        for index in 0..samples as u64 {
            let bg = random_image(&mut sample_rng(seed ^ 0xb6, index), canvas.0, canvas.1);
            let (which, s) = synthesize_sample(&bg, &assets, &config, seed, index)?;
            let spec = s.spec.expect("synthesized samples carry a spec");
            let (wm, alpha) = transform_watermark(&assets[which], &spec, canvas)?;
            let (j, cw, cb) = oracle::composite(&bg, &wm, &alpha);
            worst = worst
                .max(max_abs_diff(s.j.data(), &j))
                .max(max_abs_diff(s.c_w.data(), &cw))
                .max(max_abs_diff(s.c_b.data(), &cb))
                .max(max_abs_diff(&(s.c_w.data() + s.c_b.data()), s.j.data()))
                .max(
                    s.alpha
                        .data()
                        .iter()
                        .zip(alpha.data().iter())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max),
                );
            mask_errors += s
                .mask
                .data()
                .iter()
                .zip(s.alpha.data().iter())
                .filter(|(&m, &a)| (m == 1) != (a > 0.0))
                .count();
        }
        Ok((
            worst <= COMPOSITE_TOLERANCE && mask_errors == 0,
            format!(
                "{samples} samples, max abs error {worst:.2e} (tol {COMPOSITE_TOLERANCE:.0e}), {mask_errors} mask mismatches"
            ),
        ))
    })
}

fn relative_error(got: f64, want: f64) -> f64 {
    if got == want {
        0.0
    } else {
        (got - want).abs() / got.abs().max(want.abs())
    }
}

fn logit(p: &Tensor) -> Result<Tensor> {
    Ok((p.log()? - (1.0 - p)?.log()?)?)
}

/// Candle-side inputs equivalent to a scalar fixture.
fn fixture_tensors(fix: &LossFixture) -> Result<(LossTargets, Stage1Output, Stage2Output)> {
    let dev = Device::Cpu;
    let targets = LossTargets::from_background_and_alpha(&fix.background.to_tensor(&dev)?, &fix.alpha.to_tensor(&dev)?)?;
    let mask = fix.mask.to_tensor(&dev)?;
    let image = fix.stage1_image.to_tensor(&dev)?;
    let s1 = Stage1Output {
        mask_logits: logit(&mask)?,
        mask,
        watermark_component: (!fix.predicts_clean_image).then(|| image.zeros_like()).transpose()?,
        background_component: image,
    };
    let s2 = Stage2Output {
        restored: fix.restored.as_ref().map(|r| r.to_tensor(&dev)).transpose()?,
        imagined: fix.imagined.as_ref().map(|r| r.to_tensor(&dev)).transpose()?,
        fused: fix.fused.to_tensor(&dev)?,
    };
    Ok((targets, s1, s2))
}

fn small_extractor(seed: u64) -> Result<PerceptualExtractor> {
    PerceptualExtractor::new(&PerceptualConfig::random(seed, [4, 6, 8]), DType::F64, &Device::Cpu)
}

/// Every loss term against the scalar-loop oracle on `2×2×3` fixtures,
/// cycling through the full model and the variants that drop a term.
pub fn loss_oracle(fixtures: usize, seed: u64) -> CheckOutcome {
    run_check("loss oracle equivalence", || {
        let extractor = small_extractor(seed)?;
        let oracle_ext = OracleExtractor::from_extractor(&extractor)?;
        let w = LossWeights::default();
        let mut worst: f64 = 0.0;
        let mut worst_term = "";
        for k in 0..fixtures as u64 {
            let mut fix = LossFixture::random([1, 3, 2, 2], seed.wrapping_mul(1000).wrapping_add(k));
            match k % 4 {
                1 => fix.predicts_clean_image = true,
                2 => fix.restored = None,
                3 => fix.imagined = None,
                _ => {}
            }
            let (targets, s1, s2) = fixture_tensors(&fix)?;
            let got = losses::total_loss(&targets, &s1, &s2, &w, &extractor)?.breakdown()?;
            let want = oracle::total_loss(&fix, &w, &oracle_ext);
            for (name, g, e) in [
                ("L_b", got.l_b, want.l_b),
                ("L_r", got.l_r, want.l_r),
                ("L_i", got.l_i, want.l_i),
                ("L_f", got.l_f, want.l_f),
                ("L_m", got.l_m, want.l_m),
                ("L", got.total, want.total),
            ] {
                let r = relative_error(g, e);
                if r > worst || r.is_nan() {
                    worst = if r.is_nan() { f64::INFINITY } else { r };
                    worst_term = name;
                }
            }
        }
        Ok((
            worst <= LOSS_RELATIVE_TOLERANCE,
            format!(
                "{fixtures} fixtures, max relative error {worst:.2e} on {} (tol {LOSS_RELATIVE_TOLERANCE:.0e})",
                if worst_term.is_empty() { "-" } else { worst_term }
            ),
        ))
    })
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    BinaryMask::new(Array2::from_shape_fn((h, w), |_| u8::from(rng.random_bool(density)))).expect("binary values")
}

/// Pixel and mask metrics against scalar oracles, SSIM against a direct
/// windowed oracle, and the F1/IoU identity.
pub fn metric_oracle(fixtures: usize, seed: u64) -> CheckOutcome {
    run_check("metric oracle equivalence", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d65);
        let mut worst: f64 = 0.0;
        let mut identity: f64 = 0.0;
        for k in 0..fixtures {
            let (h, w) = (rng.random_range(2..10), rng.random_range(2..10));
            let x = random_image(&mut rng, h, w);
            // Some fixtures are near-perfect predictions.
            let y = if k % 5 == 0 {
                ImageTensor::from_clamped(x.data().mapv(|v| v + rng.random_range(-0.01..0.01)))?
            } else {
                random_image(&mut rng, h, w)
            };
            let density = [0.0, 0.1, 0.5, 1.0][k % 4];
            let truth = random_mask(&mut rng, h, w, density);
            let soft = Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0));

            worst = worst
                .max((metrics::psnr(&x, &y)? - oracle::psnr(&x, &y)).abs())
                .max((metrics::rmse(&x, &y)? - oracle::rmse(&x, &y)).abs());
            match (metrics::rmse_w(&x, &y, &truth), oracle::rmse_w(&x, &y, &truth)) {
                (Ok(a), Some(b)) => worst = worst.max((a - b).abs()),
                (Err(crate::Error::UndefinedMetric(_)), None) => {}
                _ => worst = f64::INFINITY,
            }
            let (f1, iou) = metrics::mask_f1_iou(&soft, &truth, metrics::MASK_THRESHOLD)?;
            let (of1, oiou) = oracle::f1_iou(&soft, &truth, metrics::MASK_THRESHOLD);
            worst = worst.max((f1 - of1).abs()).max((iou - oiou).abs());
            identity = identity.max((f1 - 2.0 * iou / (1.0 + iou)).abs());
        }
        let mut ssim_worst: f64 = 0.0;
        for (h, w) in [(11, 11), (16, 13), (24, 20)] {
            let x = random_image(&mut rng, h, w);
            let y = ImageTensor::from_clamped(x.data().mapv(|v| v * 0.8 + rng.random_range(0.0..0.2)))?;
            ssim_worst = ssim_worst.max((metrics::ssim(&x, &y)? - oracle::ssim(&x, &y)).abs());
        }
        Ok((
            worst <= METRIC_TOLERANCE && identity <= METRIC_TOLERANCE && ssim_worst <= SSIM_TOLERANCE,
            format!(
                "{fixtures} fixtures, max error {worst:.2e} (tol {METRIC_TOLERANCE:.0e}); SSIM max error {ssim_worst:.2e} (tol {SSIM_TOLERANCE:.0e}); F1 identity error {identity:.2e}"
            ),
        ))
    })
}

fn f64_params(seed: u64) -> Params {
    Params::new(seed, DType::F64, &Device::Cpu)
}

fn random_input(dims: [usize; 4], seed: u64, lo: f64, hi: f64) -> Result<Tensor> {
    Nchw::random(dims, seed, lo, hi).to_tensor(&Device::Cpu)
}

/// Central-difference gradient checks in f64 for every block (inputs and
/// parameters) and every loss (predictions).
pub fn gradient_suite(seed: u64) -> CheckOutcome {
    run_check("gradient suite", || {
        let x = random_input([1, 4, 8, 8], seed ^ 0x67, -1.0, 1.0)?;
        let mut results: Vec<(String, f64)> = Vec::new();
        let mut block = |name: &str, p: &Params, f: &dyn Fn(&Tensor) -> Result<Tensor>| -> Result<()> {
            let gi = gradcheck_input(f, &x, seed)?;
            let gv = gradcheck_vars(|| f(&x), &p.all_vars(), 6, seed)?;
            results.push((name.to_string(), gi.relative_error.max(gv.relative_error)));
            Ok(())
        };

        let p = f64_params(seed);
        let m = LocalMlp::new(&p, (4, 4), 2)?;
        block("local_mlp", &p, &|t| m.forward(t))?;
        let p = f64_params(seed + 1);
        let m = GlobalMlp::new(&p, (2, 2), 2)?;
        block("global_mlp", &p, &|t| m.forward(t))?;
        let p = f64_params(seed + 2);
        let m = SpectralTransform::new(&p, 4)?;
        block("spectral_transform", &p, &|t| m.forward(t))?;
        let p = f64_params(seed + 3);
        let m = Scse::new(&p, 4, 2)?;
        block("scse", &p, &|t| m.forward(t))?;
        let p = f64_params(seed + 4);
        let m = Glci::new(&p, &GlciConfig::new(4, (4, 4), (2, 2)))?;
        block("glci", &p, &|t| m.forward(t))?;
        let p = f64_params(seed + 5);
        let m = NonLocalBlock::new(&p, 4)?;
        block("nonlocal_block", &p, &|t| m.forward(t))?;

        let mut loss = |name: &str, r: f64| results.push((name.to_string(), r));
        let y = random_input([1, 4, 8, 8], seed ^ 0x79, 0.0, 1.0)?;
        let weight = random_input([1, 1, 8, 8], seed ^ 0x6d, 0.0, 1.0)?.ge(0.5)?.to_dtype(DType::F64)?;
        let xi = random_input([1, 4, 8, 8], seed ^ 0x78, 0.0, 1.0)?;
        loss("l1", gradcheck_input(|t| losses::l1(t, &y), &xi, seed)?.relative_error);
        loss("masked_l1", gradcheck_input(|t| losses::masked_l1(t, &y, &weight), &xi, seed)?.relative_error);
        let p = random_input([1, 1, 8, 8], seed ^ 0x70, 0.05, 0.95)?;
        loss("mask_bce", gradcheck_input(|t| losses::mask_bce(t, &weight), &p, seed)?.relative_error);

        let extractor = small_extractor(seed)?;
        let img = random_input([1, 3, 8, 8], seed ^ 0x69, 0.0, 1.0)?;
        let target = random_input([1, 3, 8, 8], seed ^ 0x74, 0.0, 1.0)?;
        loss(
            "perceptual",
            gradcheck_input(|t| losses::perceptual(t, &target, &extractor), &img, seed)?.relative_error,
        );

        // The total loss with respect to each prediction it consumes.
        let fix = LossFixture::random([1, 3, 8, 8], seed ^ 0x7f);
        let (targets, s1, s2) = fixture_tensors(&fix)?;
        let w = LossWeights::default();
        let total = |s1: &Stage1Output, s2: &Stage2Output| -> Result<Tensor> {
            Ok(losses::total_loss(&targets, s1, s2, &w, &extractor)?.total)
        };
        let probes: [(&str, &Tensor); 5] = [
            ("total/stage1_image", &s1.background_component),
            ("total/mask", &s1.mask),
            ("total/restored", s2.restored.as_ref().expect("fixture has both paths")),
            ("total/imagined", s2.imagined.as_ref().expect("fixture has both paths")),
            ("total/fused", &s2.fused),
        ];
        for (k, (name, at)) in probes.into_iter().enumerate() {
            let r = gradcheck_input(
                |t| {
                    let (mut a, mut b) = (s1.clone(), s2.clone());
                    match k {
                        0 => a.background_component = t.clone(),
                        1 => a.mask = t.clone(),
                        2 => b.restored = Some(t.clone()),
                        3 => b.imagined = Some(t.clone()),
                        _ => b.fused = t.clone(),
                    }
                    total(&a, &b)
                },
                at,
                seed,
            )?;
            loss(name, r.relative_error);
        }

        let (worst_name, worst) = results
            .iter()
            .map(|(n, r)| (n.as_str(), if r.is_nan() { f64::INFINITY } else { *r }))
            .fold(("", 0.0), |acc, (n, r)| if r >= acc.1 { (n, r) } else { acc });
        Ok((
            worst <= GRADIENT_TOLERANCE,
            format!(
                "{} checks, max relative error {worst:.2e} on {worst_name} (tol {GRADIENT_TOLERANCE:.0e})",
                results.len()
            ),
        ))
    })
}

/// Input positions (flattened over `C×H×W`) on which output element `index`
/// depends, from autograd.
pub fn dependency_set(f: &dyn Fn(&Tensor) -> Result<Tensor>, x: &Tensor, index: usize) -> Result<BTreeSet<usize>> {
    let var = Var::from_tensor(x)?;
    let y = f(var.as_tensor())?.flatten_all()?;
    let grads = y.get(index)?.backward()?;
    let g: Vec<f64> = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.to_vec1()?,
        None => return Ok(BTreeSet::new()),
    };
    Ok(g.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect())
}

fn impulse_response(f: &dyn Fn(&Tensor) -> Result<Tensor>, x: &Tensor, at: [usize; 4]) -> Result<Vec<f64>> {
    let base = f(x)?;
    let mut probe = Nchw::from_tensor(x)?;
    let [_, c, h, w] = probe.dims;
    let i = ((at[0] * c + at[1]) * h + at[2]) * w + at[3];
    probe.data[i] += 1.0;
    let moved = f(&probe.to_tensor(x.device())?)?;
    // Summed over channels: one entry per pixel.
    Ok((moved - base)?.abs()?.sum(1)?.flatten_all()?.to_vec1()?)
}

/// Local MLP Jacobian is block-diagonal over its patches; spectral transform
/// and global MLP spread a single-pixel impulse over the whole map; the
/// imagination path ignores the values under the mask.
pub fn receptive_field_probes(seed: u64) -> CheckOutcome {
    run_check("receptive-field probes", || {
        let (h, w) = (8, 8);
        let x = random_input([1, 2, 8, 8], seed ^ 0x72, -1.0, 1.0)?;
        let mut failures = Vec::new();

        let local = LocalMlp::new(&f64_params(seed), (4, 4), 2)?;
        let mut block_diagonal = true;
        for out in 0..2 * h * w {
            let (c, r, col) = (out / (h * w), out % (h * w) / w, out % w);
            let deps = dependency_set(&|t| local.forward(t), &x, out)?;
            let allowed = |i: usize| {
                let (ci, ri, coli) = (i / (h * w), i % (h * w) / w, i % w);
                ci == c && ri / 4 == r / 4 && coli / 4 == col / 4
            };
            if deps.is_empty() || !deps.iter().all(|&i| allowed(i)) {
                block_diagonal = false;
            }
        }
        if !block_diagonal {
            failures.push("local_mlp Jacobian leaves its patch");
        }

        let spectral = SpectralTransform::new(&f64_params(seed + 1), 2)?;
        let response = impulse_response(&|t| spectral.forward(t), &x, [0, 0, 2, 5])?;
        let spectral_cover = response.iter().filter(|v| **v > 0.0).count();
        if spectral_cover != h * w {
            failures.push("spectral_transform response is not global");
        }

        let global = GlobalMlp::new(&f64_params(seed + 2), (2, 2), 2)?;
        let response = impulse_response(&|t| global.forward(t), &x, [0, 1, 1, 2])?;
        let cells: BTreeSet<(usize, usize)> = response
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(i, _)| (i / w / 4, i % w / 4))
            .collect();
        if cells.len() != 4 {
            failures.push("global_mlp response misses a cell");
        }

        let (_, s2cfg) = ModelConfig::tiny().resolved()?;
        let net = Stage2Net::new(&Params::new(seed, DType::F32, &Device::Cpu), &s2cfg)?;
        let size = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x69);
        let mask = Array2::from_shape_fn((size, size), |(r, c)| f64::from(u8::from((8..20).contains(&r) && (4..26).contains(&c))));
        let j1: Vec<f32> = (0..3 * size * size).map(|_| rng.random()).collect();
        let j2: Vec<f32> = j1
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask[[i % (size * size) / size, i % size]] == 1.0 { rng.random() } else { v })
            .collect();
        let m = Tensor::from_vec(mask.iter().map(|&v| v as f32).collect::<Vec<_>>(), (1, 1, size, size), &Device::Cpu)?;
        let a: Vec<f32> = net.imagine_path(&Tensor::from_vec(j1, (1, 3, size, size), &Device::Cpu)?, &m)?.flatten_all()?.to_vec1()?;
        let b: Vec<f32> = net.imagine_path(&Tensor::from_vec(j2, (1, 3, size, size), &Device::Cpu)?, &m)?.flatten_all()?.to_vec1()?;
        let differing = a.iter().zip(&b).filter(|(u, v)| u.to_bits() != v.to_bits()).count();
        if differing != 0 {
            failures.push("imagine_path depends on masked pixels");
        }

        Ok((
            failures.is_empty(),
            if failures.is_empty() {
                format!(
                    "local block-diagonal, spectral covers {spectral_cover}/{} pixels, global covers {}/4 cells, imagination invariant ({} outputs)",
                    h * w,
                    cells.len(),
                    a.len()
                )
            } else {
                failures.join("; ")
            },
        ))
    })
}

/// A 6×4 feature has six 2×2 local patches and four 3×2 global patches,
/// both from the partition arithmetic and from the mixing actually
/// performed by the MLPs.
pub fn partition_example() -> CheckOutcome {
    run_check("partition example", || {
        let (h, w) = (6, 4);
        let local = local_partition(h, w, (2, 2))?;
        let global = global_partition(h, w, (2, 2))?;
        let arithmetic = local.count() == 6 && local.patch == (2, 2) && global.count() == 4 && global.patch == (3, 2);

        let x = random_input([1, 1, h, w], 7, -1.0, 1.0)?;
        let groups = |f: &dyn Fn(&Tensor) -> Result<Tensor>| -> Result<BTreeSet<BTreeSet<usize>>> {
            (0..h * w).map(|i| dependency_set(f, &x, i)).collect()
        };
        let lm = LocalMlp::new(&f64_params(1), (2, 2), 2)?;
        let gm = GlobalMlp::new(&f64_params(2), (2, 2), 2)?;
        let local_groups = groups(&|t| lm.forward_exact(t))?;
        let global_groups = groups(&|t| gm.forward_exact(t))?;
        // Local groups are the patches themselves; global groups hold one
        // position from each cell, so their size is the cell count and their
        // number the cell area.
        let local_ok = local_groups.len() == 6
            && local_groups.iter().all(|g| {
                g.len() == 4 && {
                    let rows: BTreeSet<usize> = g.iter().map(|i| i / w).collect();
                    let cols: BTreeSet<usize> = g.iter().map(|i| i % w).collect();
                    rows.len() == 2 && cols.len() == 2
                }
            });
        let global_ok = global_groups.len() == 3 * 2 && global_groups.iter().all(|g| g.len() == 4);
        Ok((
            arithmetic && local_ok && global_ok,
            format!(
                "local {} patches of {:?}, global {} patches of {:?}; observed {} local groups, {} global position classes",
                local.count(),
                local.patch,
                global.count(),
                global.patch,
                local_groups.len(),
                global_groups.len()
            ),
        ))
    })
}

/// Configuration for short training runs on tiny inputs.
pub fn smoke_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 100,
        batch_size: 2,
        seed,
        model_preset: ModelPreset::Tiny,
        perceptual_widths: [8, 16, 16],
        perceptual_seed: seed,
        checkpoint_every: 0,
        log_every: 0,
        ..TrainConfig::default()
    }
}

/// Two identically seeded runs agree on the step-0 and step-10 total loss
/// to six decimals.
pub fn determinism(seed: u64) -> CheckOutcome {
    run_check("determinism", || {
        let data = synthetic_samples(4, 32, (0.5, 1.0), seed)?;
        let cfg = TrainConfig {
            max_steps: 11,
            ..smoke_config(seed)
        };
        let run = || -> Result<(String, String)> {
            let (model, ext) = build(&cfg, DType::F32, &Device::Cpu)?;
            let (record, _) = train_with(&cfg, model, ext, &data, None, None)?;
            let at = |k: usize| format!("{:.6}", record.steps[k].loss.total);
            Ok((at(0), at(10)))
        };
        let (a, b) = (run()?, run()?);
        Ok((
            a == b,
            format!("step 0: {} / {}; step 10: {} / {}", a.0, b.0, a.1, b.1),
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_suite_passes() {
        let c = gradient_suite(1);
        assert!(c.passed, "{}", c.line());
    }

    #[test]
    fn small_selftest_passes() {
        let opts = SelftestOptions {
            compositing_samples: 20,
            loss_fixtures: 8,
            metric_fixtures: 8,
            seed: 3,
        };
        for c in [
            compositing_identity(opts.compositing_samples, opts.seed),
            loss_oracle(opts.loss_fixtures, opts.seed),
            metric_oracle(opts.metric_fixtures, opts.seed),
            partition_example(),
        ] {
            assert!(c.passed, "{}", c.line());
        }
    }

    #[test]
    fn failures_are_reported_not_raised() {
        let c = run_check("x", || Err(crate::Error::config("boom")));
        assert!(!c.passed);
        assert!(c.line().starts_with("FAIL x: error:"));
    }

    #[test]
    fn synthetic_samples_are_deterministic() {
        let a = synthetic_samples(3, 16, (0.1, 1.0), 2).unwrap();
        let b = synthetic_samples(3, 16, (0.1, 1.0), 2).unwrap();
        assert_eq!(a[2].1.j, b[2].1.j);
        assert_eq!(a[1].0, "000001");
    }
}
