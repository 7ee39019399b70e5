//! Seeded stand-ins for real backgrounds and logos, so datasets can be built
//! without external image collections.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::WatermarkAsset;
use crate::error::Result;
use crate::imaging::{save_image, save_rgba, AlphaMap, ImageTensor};

fn rng(seed: u64, kind: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(kind << 32 | index);
    r
}

fn colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// A natural-looking background: a smooth gradient, low-frequency waves and
/// a few flat shapes with soft edges.
pub fn background(seed: u64, index: u64, height: usize, width: usize) -> ImageTensor {
    let mut rng = rng(seed, 1, index);
    let (top, bottom) = (colour(&mut rng), colour(&mut rng));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..4.0),
                rng.random_range(0.5..4.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.12),
            )
        })
        .collect();
    let shapes: Vec<(f64, f64, f64, [f64; 3], bool)> = (0..rng.random_range(2..6))
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.3),
                colour(&mut rng),
                rng.random_bool(0.5),
            )
        })
        .collect();
    let data = Array3::from_shape_fn((height, width, 3), |(r, c, k)| {
        let y = (r as f64 + 0.5) / height as f64;
        let x = (c as f64 + 0.5) / width as f64;
        let mut v = top[k] * (1.0 - y) + bottom[k] * y;
        for (i, &(fy, fx, phase, amp)) in waves.iter().enumerate() {
            v += amp * (std::f64::consts::TAU * (fy * y + fx * x) + phase + i as f64 * k as f64).sin();
        }
        for &(cy, cx, size, col, round) in &shapes {
            let d = if round {
                ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() / size
            } else {
                ((y - cy).abs()).max((x - cx).abs()) / size
            };
            let cover = ((1.0 - d) * 8.0).clamp(0.0, 1.0);
            v = v * (1.0 - cover) + col[k] * cover;
        }
        v.clamp(0.0, 1.0)
    });
    ImageTensor::new(data).expect("clamped background")
}

/// A logo-like asset: rings, bars and blocks in one or two colours with
/// anti-aliased coverage.
pub fn watermark(seed: u64, index: u64, height: usize, width: usize) -> WatermarkAsset {
    let mut rng = rng(seed, 2, index);
    let palette = [colour(&mut rng), colour(&mut rng)];
    let mut alpha = Array2::<f64>::zeros((height, width));
    let mut rgb = Array3::<f64>::zeros((height, width, 3));
    for k in 0..3 {
        rgb.index_axis_mut(ndarray::Axis(2), k).fill(palette[0][k]);
    }
    let strokes = rng.random_range(3..7);
    let aa = 1.5 / height.min(width) as f64;
    for _ in 0..strokes {
        let kind = rng.random_range(0..3);
        let cy = rng.random_range(0.2..0.8);
        let cx = rng.random_range(0.15..0.85);
        let size = rng.random_range(0.12..0.35);
        let thick = rng.random_range(0.04..0.12);
        let col = palette[rng.random_range(0..2)];
        for r in 0..height {
            for c in 0..width {
                let y = (r as f64 + 0.5) / height as f64;
                let x = (c as f64 + 0.5) / width as f64;
                // Signed distance, negative inside.
                let d = match kind {
                    0 => (((y - cy).powi(2) + (x - cx).powi(2)).sqrt() - size).abs() - thick / 2.0,
                    1 => ((y - cy).abs() - thick / 2.0).max((x - cx).abs() - size),
                    _ => ((y - cy).abs() - size / 2.0).max((x - cx).abs() - size / 2.0),
                };
                let cover = (0.5 - d / aa).clamp(0.0, 1.0);
                if cover > 0.0 {
                    let a = alpha[[r, c]];
                    alpha[[r, c]] = a + cover * (1.0 - a);
                    for k in 0..3 {
                        rgb[[r, c, k]] = rgb[[r, c, k]] * (1.0 - cover) + col[k] * cover;
                    }
                }
            }
        }
    }
    if alpha.iter().all(|&a| a == 0.0) {
        alpha[[height / 2, width / 2]] = 1.0;
    }
    WatermarkAsset::new(
        format!("wm{index:04}"),
        ImageTensor::from_clamped(rgb).expect("clamped logo"),
        AlphaMap::new(alpha.mapv(|a| a.clamp(0.0, 1.0))).expect("clamped alpha"),
    )
    .expect("non-empty logo")
}

/// Writes `backgrounds` PNG backgrounds and `watermarks` RGBA PNG logos into
/// `out/backgrounds` and `out/watermarks`.
pub fn write_sources(
    out: impl AsRef<Path>,
    backgrounds: usize,
    watermarks: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<()> {
    let out = out.as_ref();
    for i in 0..backgrounds {
        let img = background(seed, i as u64, size.0, size.1);
        save_image(&img, out.join("backgrounds").join(format!("bg{i:04}.png")))?;
    }
    let logo = (size.0.div_ceil(2).max(8), size.1.div_ceil(2).max(8));
    for i in 0..watermarks {
        let wm = watermark(seed, i as u64, logo.0, logo.1);
        save_rgba(&wm.rgb, &wm.alpha, out.join("watermarks").join(format!("{}.png", wm.id)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_varied() {
        let a = background(1, 0, 16, 16);
        let b = background(1, 0, 16, 16);
        let c = background(1, 1, 16, 16);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
        let w = watermark(1, 0, 12, 20);
        assert!(!w.alpha.is_all_zero());
        assert!(w.alpha.data().iter().any(|&v| v == 0.0));
    }
}
