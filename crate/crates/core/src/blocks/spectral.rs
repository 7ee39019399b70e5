//! Frequency-domain convolution with an image-wide receptive field.
//!
//! The real 2-D Fourier transform (orthonormal scaling) is expressed as
//! products with cosine/sine matrices so it participates in autograd like any
//! other tensor op. Only the non-redundant `W/2 + 1` columns of the spectrum
//! are kept, as with a real-input FFT.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, InstanceNorm, Params};

fn matrix(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64, dtype: DType, dev: &Device) -> Result<Tensor> {
    let v: Vec<f64> = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
    Ok(Tensor::from_vec(v, (rows, cols), dev)?.to_dtype(dtype)?)
}

/// `x @ m` over the last axis of a rank-4 tensor.
fn right_mul(x: &Tensor, m: &Tensor) -> Result<Tensor> {
    let (a, b, c, d) = x.dims4()?;
    let out = m.dim(1)?;
    Ok(x.contiguous()?
        .reshape((a * b * c, d))?
        .matmul(m)?
        .reshape((a, b, c, out))?)
}

fn swap_hw(x: &Tensor) -> Result<Tensor> {
    Ok(x.transpose(2, 3)?.contiguous()?)
}

struct Basis {
    cos_w: Tensor,
    sin_w: Tensor,
    cos_h: Tensor,
    sin_h: Tensor,
    scale: f64,
}

impl Basis {
    fn new(h: usize, w: usize, dtype: DType, dev: &Device) -> Result<Self> {
        let wf = w / 2 + 1;
        let ang_w = move |a: usize, b: usize| 2.0 * PI * (a * b % w) as f64 / w as f64;
        let ang_h = move |a: usize, b: usize| 2.0 * PI * (a * b % h) as f64 / h as f64;
        Ok(Self {
            cos_w: matrix(w, wf, |x, l| ang_w(x, l).cos(), dtype, dev)?,
            sin_w: matrix(w, wf, |x, l| ang_w(x, l).sin(), dtype, dev)?,
            cos_h: matrix(h, h, |a, b| ang_h(a, b).cos(), dtype, dev)?,
            sin_h: matrix(h, h, |a, b| ang_h(a, b).sin(), dtype, dev)?,
            scale: 1.0 / ((h * w) as f64).sqrt(),
        })
    }
}

/// Orthonormal real 2-D DFT of `N×C×H×W`; returns `(re, im)`, each
/// `N×C×H×(W/2+1)`.
pub fn rfft2(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, _, h, w) = x.dims4()?;
    let b = Basis::new(h, w, x.dtype(), x.device())?;
    // rows: x e^{-iθ} = x cosθ - i x sinθ
    let a = swap_hw(&right_mul(x, &b.cos_w)?)?;
    let bi = swap_hw(&right_mul(x, &b.sin_w)?.neg()?)?;
    // columns: (C - iS)(A + iB) = CA + SB + i(CB - SA); C and S are symmetric
    let re = (right_mul(&a, &b.cos_h)? + right_mul(&bi, &b.sin_h)?)?;
    let im = (right_mul(&bi, &b.cos_h)? - right_mul(&a, &b.sin_h)?)?;
    Ok((
        (swap_hw(&re)? * b.scale)?,
        (swap_hw(&im)? * b.scale)?,
    ))
}

/// Inverse of [`rfft2`] for a real signal of width `w`.
pub fn irfft2(re: &Tensor, im: &Tensor, w: usize) -> Result<Tensor> {
    let (_, _, h, wf) = re.dims4()?;
    if wf != w / 2 + 1 {
        return Err(Error::contract(format!("spectrum width {wf} does not match signal width {w}")));
    }
    let b = Basis::new(h, w, re.dtype(), re.device())?;
    let re_t = swap_hw(re)?;
    let im_t = swap_hw(im)?;
    // columns: (C + iS)(X) = CXr - SXi + i(CXi + SXr)
    let yr = swap_hw(&(right_mul(&re_t, &b.cos_h)? - right_mul(&im_t, &b.sin_h)?)?)?;
    let yi = swap_hw(&(right_mul(&im_t, &b.cos_h)? + right_mul(&re_t, &b.sin_h)?)?)?;
    // rows: Hermitian completion weights 1 for DC/Nyquist, 2 otherwise
    let weight = |l: usize| if l == 0 || (w % 2 == 0 && l == w / 2) { 1.0 } else { 2.0 };
    let ang = |l: usize, x: usize| 2.0 * PI * (l * x % w) as f64 / w as f64;
    let pc = matrix(wf, w, |l, x| weight(l) * ang(l, x).cos(), re.dtype(), re.device())?;
    let ps = matrix(wf, w, |l, x| weight(l) * ang(l, x).sin(), re.dtype(), re.device())?;
    Ok(((right_mul(&yr, &pc)? - right_mul(&yi, &ps)?)? * b.scale)?)
}

/// Fourier unit: FFT → pointwise conv + norm + GELU on stacked
/// real/imaginary channels → inverse FFT.
#[derive(Debug, Clone)]
pub struct SpectralTransform {
    conv: Conv2d,
    norm: InstanceNorm,
    channels: usize,
}

impl SpectralTransform {
    pub fn new(p: &Params, channels: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&p.pp("conv"), 2 * channels, 2 * channels, 1, 1)?,
            norm: InstanceNorm::new(&p.pp("norm"), 2 * channels)?,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::contract(format!("expected {} channels, got {c}", self.channels)));
        }
        if h < 2 || w < 2 {
            return Err(Error::contract("spectral transform needs spatial dims >= 2"));
        }
        let total: f64 = x.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar()?;
        if !total.is_finite() {
            return Err(Error::Numeric("non-finite input to spectral transform".into()));
        }
        let (re, im) = rfft2(x)?;
        let freq = Tensor::cat(&[&re, &im], 1)?;
        let freq = self.norm.forward(&self.conv.forward(&freq)?)?.gelu_erf()?;
        let re = freq.narrow(1, 0, c)?;
        let im = freq.narrow(1, c, c)?;
        irfft2(&re, &im, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::testing::{random_tensor, zero_param};
    use rustfft::{num_complex::Complex, FftPlanner};

    fn fft2_reference(x: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
        let mut planner = FftPlanner::new();
        let row = planner.plan_fft_forward(w);
        let col = planner.plan_fft_forward(h);
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        for r in 0..h {
            row.process(&mut buf[r * w..(r + 1) * w]);
        }
        for c in 0..w {
            let mut column: Vec<Complex<f64>> = (0..h).map(|r| buf[r * w + c]).collect();
            col.process(&mut column);
            for r in 0..h {
                buf[r * w + c] = column[r];
            }
        }
        buf
    }

    #[test]
    fn forward_matches_fft() {
        for &(h, w) in &[(4usize, 6usize), (5, 7), (8, 8)] {
            let x = random_tensor(&[1, 1, h, w], (h * w) as u64);
            let (re, im) = rfft2(&x).unwrap();
            let re: Vec<f64> = re.flatten_all().unwrap().to_vec1().unwrap();
            let im: Vec<f64> = im.flatten_all().unwrap().to_vec1().unwrap();
            let reference = fft2_reference(&x.flatten_all().unwrap().to_vec1::<f64>().unwrap(), h, w);
            let wf = w / 2 + 1;
            let s = 1.0 / ((h * w) as f64).sqrt();
            for k in 0..h {
                for l in 0..wf {
                    let z = reference[k * w + l] * s;
                    assert!((re[k * wf + l] - z.re).abs() < 1e-12);
                    assert!((im[k * wf + l] - z.im).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn round_trip_is_identity() {
        for &(h, w) in &[(4usize, 6usize), (5, 7), (3, 2)] {
            let x = random_tensor(&[2, 3, h, w], 11);
            let (re, im) = rfft2(&x).unwrap();
            let back = irfft2(&re, &im, w).unwrap();
            let err: f64 = (back - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
            assert!(err < 1e-5, "{h}x{w}: {err}");
        }
    }

    #[test]
    fn zero_in_zero_out_with_zero_bias() {
        let p = Params::new(1, DType::F64, &Device::Cpu);
        let st = SpectralTransform::new(&p, 2).unwrap();
        zero_param(&p, "conv.bias");
        let x = Tensor::zeros((1, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let y: f64 = st.forward(&x).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(y, 0.0);
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let p = Params::new(1, DType::F64, &Device::Cpu);
        let st = SpectralTransform::new(&p, 1).unwrap();
        let x = Tensor::from_vec(vec![0.0, f64::NAN, 0.0, 0.0], (1, 1, 2, 2), &Device::Cpu).unwrap();
        assert!(matches!(st.forward(&x), Err(Error::Numeric(_))));
    }
}
