//! Synthetic watermarked data.
//!
//! A watermark asset is flipped, resized, rotated, placed and faded by a
//! randomly drawn [`CompositeSpec`], then alpha-composited over a clean
//! background. Every sample carries the full decomposition
//! `J = C_w + C_b` with `C_w = A∘W'` and `C_b = (1−A)∘I`.

mod dataset;
pub mod procedural;

pub use dataset::{
    generate_dataset, load_assets, load_background, Dataset, DatasetManifest, ManifestEntry, SampleFiles,
    MANIFEST_FILE, MANIFEST_SCHEMA_VERSION,
};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{AlphaMap, BinaryMask, ImageTensor};

/// A logo: colours plus coverage.
#[derive(Debug, Clone)]
pub struct WatermarkAsset {
    pub id: String,
    pub rgb: ImageTensor,
    pub alpha: AlphaMap,
}

impl WatermarkAsset {
    pub fn new(id: impl Into<String>, rgb: ImageTensor, alpha: AlphaMap) -> Result<Self> {
        if rgb.dims() != alpha.dims() {
            return Err(Error::contract("watermark colours and alpha differ in size"));
        }
        if alpha.is_all_zero() {
            return Err(Error::contract("watermark alpha is identically zero"));
        }
        Ok(Self {
            id: id.into(),
            rgb,
            alpha,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.rgb.dims()
    }
}

/// Distributions the per-sample transform is drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    /// Open interval of the watermark opacity.
    pub opacity_range: (f64, f64),
    /// Watermark width after resizing, as a fraction of the canvas width.
    pub width_fraction: (f64, f64),
    /// Rotation bounds in degrees.
    pub rotation_deg: (f64, f64),
    pub flip_probability: f64,
    /// Output size (height, width).
    pub canvas: (usize, usize),
    /// Fraction of samples held out as the validation split.
    pub val_fraction: f64,
    /// Split tag of the remaining samples.
    pub split: String,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self::hwvoc()
    }
}

impl SynthesisConfig {
    pub fn with_opacity(low: f64, high: f64) -> Self {
        Self {
            opacity_range: (low, high),
            width_fraction: (0.5, 1.0),
            rotation_deg: (-45.0, 45.0),
            flip_probability: 0.5,
            canvas: (256, 256),
            val_fraction: 0.02,
            split: "train".into(),
        }
    }

    /// Opacity in (0.5, 1).
    pub fn hwvoc() -> Self {
        Self::with_opacity(0.5, 1.0)
    }

    /// Opacity in (0.1, 1).
    pub fn pw() -> Self {
        Self::with_opacity(0.1, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.opacity_range;
        if !(0.0..1.0).contains(&lo) || !(hi > lo && hi <= 1.0) {
            return Err(Error::config(format!("invalid opacity interval ({lo}, {hi})")));
        }
        let (flo, fhi) = self.width_fraction;
        if !(flo > 0.0 && fhi >= flo && fhi.is_finite()) {
            return Err(Error::config(format!("invalid width fraction [{flo}, {fhi}]")));
        }
        let (rlo, rhi) = self.rotation_deg;
        if !(rlo.is_finite() && rhi.is_finite() && rhi >= rlo) {
            return Err(Error::config(format!("invalid rotation bounds [{rlo}, {rhi}]")));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::config("flip probability must lie in [0, 1]"));
        }
        if self.canvas.0 == 0 || self.canvas.1 == 0 {
            return Err(Error::config("canvas must be non-empty"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("validation fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Geometric and opacity alteration of one watermark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeSpec {
    pub flip_h: bool,
    /// Resize factor applied to the asset.
    pub scale: f64,
    /// Counter-clockwise rotation in degrees.
    pub rotation: f64,
    /// Top-left corner (row, col) of the transformed footprint's bounding
    /// box on the canvas; may be negative.
    pub position: (i64, i64),
    pub opacity: f64,
    /// Seed of the generator this spec was drawn from.
    pub seed: u64,
}

impl CompositeSpec {
    pub fn identity() -> Self {
        Self {
            flip_h: false,
            scale: 1.0,
            rotation: 0.0,
            position: (0, 0),
            opacity: 1.0,
            seed: 0,
        }
    }
}

/// Per-sample seed derived from the dataset seed and the sample index.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair.
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sample_seed(seed, index))
}

fn extent(x: f64) -> usize {
    (x - 1e-9).ceil().max(1.0) as usize
}

/// Bounding box (height, width) of an `h×w` rectangle scaled by `scale` and
/// rotated by `rotation` degrees.
pub fn footprint_dims(asset: (usize, usize), scale: f64, rotation: f64) -> (usize, usize) {
    let (h, w) = (asset.0 as f64 * scale, asset.1 as f64 * scale);
    let (s, c) = rotation.to_radians().sin_cos();
    let (s, c) = (s.abs(), c.abs());
    (extent(h * c + w * s), extent(w * c + h * s))
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws a transform for an asset of size `asset` on `config.canvas`.
pub fn sample_transform(rng: &mut impl Rng, config: &SynthesisConfig, asset: (usize, usize)) -> Result<CompositeSpec> {
    config.validate()?;
    if asset.0 == 0 || asset.1 == 0 {
        return Err(Error::contract("empty watermark asset"));
    }
    let (ch, cw) = config.canvas;
    let flip_h = rng.random_bool(config.flip_probability);
    let fraction = uniform(rng, config.width_fraction.0, config.width_fraction.1);
    let scale = fraction * cw as f64 / asset.1 as f64;
    let rotation = uniform(rng, config.rotation_deg.0, config.rotation_deg.1);
    let (lo, hi) = config.opacity_range;
    let opacity = loop {
        let v = uniform(rng, lo, hi);
        if v > lo {
            break v;
        }
    };
    let (bh, bw) = footprint_dims(asset, scale, rotation);
    let mut place = |canvas: usize, extent: usize| -> i64 {
        let free = canvas as i64 - extent as i64;
        let (a, b) = if free >= 0 { (0, free) } else { (free, 0) };
        rng.random_range(a..=b)
    };
    let position = (place(ch, bh), place(cw, bw));
    Ok(CompositeSpec {
        flip_h,
        scale,
        rotation,
        position,
        opacity,
        seed: 0,
    })
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Bilinear sample at continuous pixel coordinates (pixel `k` sits at `k`).
/// Outside the grid, `fill` supplies the value; `None` clamps to the edge.
fn bilinear(grid: impl Fn(usize, usize) -> f64, h: usize, w: usize, y: f64, x: f64, fill: Option<f64>) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |r: f64, c: f64| -> f64 {
        let inside = r >= 0.0 && c >= 0.0 && r < h as f64 && c < w as f64;
        match (inside, fill) {
            (true, _) => grid(r as usize, c as usize),
            (false, Some(v)) => v,
            (false, None) => grid(
                r.clamp(0.0, (h - 1) as f64) as usize,
                c.clamp(0.0, (w - 1) as f64) as usize,
            ),
        }
    };
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let weight = wy * wx;
            if weight > 0.0 {
                acc += weight * at(y0 + dy, x0 + dx);
            }
        }
    }
    acc
}

/// Places the transformed watermark on an `H×W` canvas.
///
/// Returns the transformed colours `W'` (edge-extended outside the footprint)
/// and the opacity map `A`, which is the resampled asset alpha times
/// `spec.opacity` and zero outside the footprint.
pub fn transform_watermark(
    asset: &WatermarkAsset,
    spec: &CompositeSpec,
    canvas: (usize, usize),
) -> Result<(ImageTensor, AlphaMap)> {
    if !(spec.scale > 0.0 && spec.scale.is_finite()) {
        return Err(Error::contract("scale must be positive"));
    }
    if !(0.0..=1.0).contains(&spec.opacity) {
        return Err(Error::contract("opacity must lie in [0, 1]"));
    }
    let (ah, aw) = asset.dims();
    let (ch, cw) = canvas;
    let (bh, bw) = footprint_dims((ah, aw), spec.scale, spec.rotation);
    let cy = spec.position.0 as f64 + bh as f64 / 2.0;
    let cx = spec.position.1 as f64 + bw as f64 / 2.0;
    let (sin, cos) = spec.rotation.to_radians().sin_cos();
    let (sh, sw) = (ah as f64 * spec.scale, aw as f64 * spec.scale);

    let rgb = asset.rgb.data();
    let alpha = asset.alpha.data();
    let mut out_rgb = Array3::<f64>::zeros((ch, cw, 3));
    let mut out_alpha = Array2::<f64>::zeros((ch, cw));
    for r in 0..ch {
        for c in 0..cw {
            let dy = r as f64 + 0.5 - cy;
            let dx = c as f64 + 0.5 - cx;
            let u = cos * dx - sin * dy;
            let v = sin * dx + cos * dy;
            let mut ax = (u + sw / 2.0) / spec.scale;
            let ay = (v + sh / 2.0) / spec.scale;
            if spec.flip_h {
                ax = aw as f64 - ax;
            }
            let (y, x) = (snap(ay - 0.5), snap(ax - 0.5));
            if y <= -1.0 || x <= -1.0 || y >= ah as f64 || x >= aw as f64 {
                for k in 0..3 {
                    out_rgb[[r, c, k]] = bilinear(|i, j| rgb[[i, j, k]], ah, aw, y, x, None);
                }
                continue;
            }
            let a = bilinear(|i, j| alpha[[i, j]], ah, aw, y, x, Some(0.0));
            out_alpha[[r, c]] = (a * spec.opacity).clamp(0.0, 1.0);
            for k in 0..3 {
                out_rgb[[r, c, k]] = bilinear(|i, j| rgb[[i, j, k]], ah, aw, y, x, None).clamp(0.0, 1.0);
            }
        }
    }
    let alpha = AlphaMap::new(out_alpha)?;
    if alpha.is_all_zero() {
        return Err(Error::Placement(format!(
            "watermark at {:?} leaves no visible pixel on a {ch}×{cw} canvas",
            spec.position
        )));
    }
    Ok((ImageTensor::new(out_rgb)?, alpha))
}

/// A fully supervised training tuple.
#[derive(Debug, Clone)]
pub struct Sample {
    pub j: ImageTensor,
    pub i: ImageTensor,
    pub c_w: ImageTensor,
    pub c_b: ImageTensor,
    pub alpha: AlphaMap,
    pub mask: BinaryMask,
    pub spec: Option<CompositeSpec>,
}

/// Alpha-composites `W'` over `I`: `C_w = A∘W'`, `C_b = (1−A)∘I`,
/// `J = C_w + C_b`, `M = A > 0`.
pub fn composite(background: &ImageTensor, watermark: &ImageTensor, alpha: &AlphaMap) -> Result<Sample> {
    if background.dims() != watermark.dims() || background.dims() != alpha.dims() {
        return Err(Error::contract(format!(
            "compositing operands differ in size: I {:?}, W' {:?}, A {:?}",
            background.dims(),
            watermark.dims(),
            alpha.dims()
        )));
    }
    let (h, w) = background.dims();
    let a = alpha.data();
    let c_w = Array3::from_shape_fn((h, w, 3), |(r, c, k)| a[[r, c]] * watermark.get(r, c, k));
    let c_b = Array3::from_shape_fn((h, w, 3), |(r, c, k)| (1.0 - a[[r, c]]) * background.get(r, c, k));
    let j = &c_w + &c_b;
    Ok(Sample {
        j: ImageTensor::from_clamped(j)?,
        i: background.clone(),
        c_w: ImageTensor::new(c_w)?,
        c_b: ImageTensor::new(c_b)?,
        alpha: alpha.clone(),
        mask: alpha.to_mask(),
        spec: None,
    })
}

/// Rebuilds the decomposition of a stored sample from `J`, `I` and `A`:
/// `C_b = (1−A)∘I` and `C_w = J − C_b`, so `C_w + C_b == J` holds in the
/// stored precision.
pub fn decompose(j: &ImageTensor, background: &ImageTensor, alpha: &AlphaMap) -> Result<Sample> {
    if j.dims() != background.dims() || j.dims() != alpha.dims() {
        return Err(Error::contract("stored sample components differ in size"));
    }
    let (h, w) = j.dims();
    let a = alpha.data();
    let c_b = Array3::from_shape_fn((h, w, 3), |(r, c, k)| (1.0 - a[[r, c]]) * background.get(r, c, k));
    let c_w = (j.data() - &c_b).mapv(|v| v.max(0.0));
    Ok(Sample {
        j: j.clone(),
        i: background.clone(),
        c_w: ImageTensor::from_clamped(c_w)?,
        c_b: ImageTensor::new(c_b)?,
        alpha: alpha.clone(),
        mask: alpha.to_mask(),
        spec: None,
    })
}

/// Draws a transform and composites one sample in memory. The generator is
/// seeded from `(seed, index)`, so results do not depend on evaluation
/// order.
pub fn synthesize_sample(
    background: &ImageTensor,
    assets: &[WatermarkAsset],
    config: &SynthesisConfig,
    seed: u64,
    index: u64,
) -> Result<(usize, Sample)> {
    if assets.is_empty() {
        return Err(Error::contract("no watermark assets"));
    }
    if background.dims() != config.canvas {
        return Err(Error::contract("background does not match the canvas size"));
    }
    let spec_seed = sample_seed(seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(spec_seed);
    let which = rng.random_range(0..assets.len());
    let asset = &assets[which];
    // A placement can miss every opaque pixel of a sparse logo; redraw from
    // the same stream.
    let mut last = None;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let mut spec = sample_transform(&mut rng, config, asset.dims())?;
        spec.seed = spec_seed;
        match transform_watermark(asset, &spec, config.canvas) {
            Ok((wm, alpha)) => {
                let mut sample = composite(background, &wm, &alpha)?;
                sample.spec = Some(spec);
                return Ok((which, sample));
            }
            Err(e @ Error::Placement(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Placement("no placement attempts".into())))
}

const PLACEMENT_ATTEMPTS: usize = 16;

#[cfg(test)]
mod tests {
    use super::*;

    fn asset(h: usize, w: usize) -> WatermarkAsset {
        let rgb = ImageTensor::new(Array3::from_shape_fn((h, w, 3), |(r, c, k)| {
            ((r * 31 + c * 17 + k * 7) % 97) as f64 / 96.0
        }))
        .unwrap();
        let alpha = AlphaMap::new(Array2::from_shape_fn((h, w), |(r, c)| ((r + 2 * c) % 5) as f64 / 4.0)).unwrap();
        WatermarkAsset::new("a", rgb, alpha).unwrap()
    }

    #[test]
    fn presets_respect_opacity_intervals() {
        for (cfg, lo) in [(SynthesisConfig::hwvoc(), 0.5), (SynthesisConfig::pw(), 0.1)] {
            for i in 0..200 {
                let spec = sample_transform(&mut sample_rng(3, i), &cfg, (40, 60)).unwrap();
                assert!(spec.opacity > lo && spec.opacity < 1.0);
                assert!((-45.0..=45.0).contains(&spec.rotation));
            }
        }
    }

    #[test]
    fn same_seed_same_spec() {
        let cfg = SynthesisConfig::pw();
        let a = sample_transform(&mut sample_rng(9, 4), &cfg, (30, 50)).unwrap();
        let b = sample_transform(&mut sample_rng(9, 4), &cfg, (30, 50)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inverted_interval_rejected() {
        let cfg = SynthesisConfig::with_opacity(0.8, 0.3);
        assert!(matches!(sample_transform(&mut sample_rng(0, 0), &cfg, (4, 4)), Err(Error::Config(_))));
    }

    #[test]
    fn identity_transform_copies_asset() {
        let a = asset(5, 7);
        let (wm, alpha) = transform_watermark(&a, &CompositeSpec::identity(), (9, 10)).unwrap();
        for r in 0..9 {
            for c in 0..10 {
                let inside = r < 5 && c < 7;
                let expected = if inside { a.alpha.get(r, c) } else { 0.0 };
                assert_eq!(alpha.get(r, c), expected);
                if inside {
                    for k in 0..3 {
                        assert_eq!(wm.get(r, c, k), a.rgb.get(r, c, k));
                    }
                }
            }
        }
    }

    #[test]
    fn opacity_scales_flat_alpha() {
        let a = WatermarkAsset::new("flat", ImageTensor::filled(4, 4, 0.3), AlphaMap::filled(4, 4, 1.0)).unwrap();
        let spec = CompositeSpec {
            opacity: 0.5,
            position: (2, 1),
            ..CompositeSpec::identity()
        };
        let (_, alpha) = transform_watermark(&a, &spec, (8, 8)).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let inside = (2..6).contains(&r) && (1..5).contains(&c);
                assert_eq!(alpha.get(r, c), if inside { 0.5 } else { 0.0 });
            }
        }
    }

    #[test]
    fn quarter_turn_matches_direct_remap() {
        let a = asset(3, 6);
        let spec = CompositeSpec {
            rotation: 90.0,
            ..CompositeSpec::identity()
        };
        assert_eq!(footprint_dims((3, 6), 1.0, 90.0), (6, 3));
        let (_, alpha) = transform_watermark(&a, &spec, (8, 8)).unwrap();
        // Counter-clockwise quarter turn: out[r][c] = in[c][w-1-r].
        for r in 0..8 {
            for c in 0..8 {
                let expected = if r < 6 && c < 3 { a.alpha.get(c, 5 - r) } else { 0.0 };
                assert!((alpha.get(r, c) - expected).abs() < 1e-12, "({r},{c})");
            }
        }
    }

    #[test]
    fn flip_mirrors_columns() {
        let a = asset(4, 5);
        let spec = CompositeSpec {
            flip_h: true,
            ..CompositeSpec::identity()
        };
        let (_, alpha) = transform_watermark(&a, &spec, (4, 5)).unwrap();
        for r in 0..4 {
            for c in 0..5 {
                assert_eq!(alpha.get(r, c), a.alpha.get(r, 4 - c));
            }
        }
    }

    #[test]
    fn off_canvas_placement_fails() {
        let a = asset(4, 4);
        let spec = CompositeSpec {
            position: (20, 20),
            ..CompositeSpec::identity()
        };
        assert!(matches!(transform_watermark(&a, &spec, (8, 8)), Err(Error::Placement(_))));
    }

    #[test]
    fn composite_cases() {
        let bg = ImageTensor::filled(2, 2, 0.2);
        let wm = ImageTensor::filled(2, 2, 0.8);
        let s = composite(&bg, &wm, &AlphaMap::zeros(2, 2)).unwrap();
        assert_eq!(s.j.data(), bg.data());
        assert!(s.c_w.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.mask.count(), 0);
        let s = composite(&bg, &wm, &AlphaMap::filled(2, 2, 0.5)).unwrap();
        assert!((s.j.get(0, 0, 0) - 0.5).abs() < 1e-15);
        let s = composite(&bg, &wm, &AlphaMap::filled(2, 2, 1.0)).unwrap();
        assert_eq!(s.j.data(), wm.data());
        assert!(composite(&bg, &ImageTensor::zeros(3, 2), &AlphaMap::zeros(2, 2)).is_err());
    }
}
