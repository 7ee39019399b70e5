//! Square-kernel 2-D convolution lowered to `im2col` + GEMM.
//!
//! The patch extraction (`im2col`) and its adjoint (`col2im`) are custom ops
//! whose backward passes are each other, so the whole convolution is
//! differentiable through candle's autograd while the heavy lifting happens
//! in the matmul kernel.

use candle_core::backend::BackendStorage;
use candle_core::{bail, CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use super::params::{Init, Params};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> candle_core::Result<Self> {
        if height + 2 * pad < kernel || width + 2 * pad < kernel {
            bail!("conv input {height}x{width} smaller than kernel {kernel} with padding {pad}");
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output positions `lo..hi` along one axis whose input index for
    /// kernel offset `k` lies inside `0..extent`.
    fn valid(&self, outputs: usize, k: usize, extent: usize) -> (usize, usize) {
        let lo = if self.pad > k { (self.pad - k).div_ceil(self.stride) } else { 0 };
        let hi = if extent + self.pad > k {
            (extent + self.pad - k).div_ceil(self.stride).min(outputs)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Input index for output index `o` at kernel offset `k`; only called on the
/// valid range.
#[inline]
fn source(o: usize, k: usize, g: &Geometry) -> usize {
    o * g.stride + k - g.pad
}

/// Patches as a `(C·k·k) × (N·L)` matrix, so one GEMM covers the batch.
fn im2col<T: WithDType>(src: &[T], batch: usize, g: &Geometry) -> Vec<T> {
    let plane = g.height * g.width;
    let l = g.cols();
    let stride_row = batch * l;
    let mut dst = vec![T::zero(); g.rows() * stride_row];
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            let (h_lo, h_hi) = g.valid(g.out_h, ki, g.height);
            for kj in 0..g.kernel {
                let (w_lo, w_hi) = g.valid(g.out_w, kj, g.width);
                let row = ((c * g.kernel + ki) * g.kernel + kj) * stride_row;
                for b in 0..batch {
                    let input = &src[(b * g.channels + c) * plane..][..plane];
                    let out = &mut dst[row + b * l..][..l];
                    for oh in h_lo..h_hi {
                        let irow = &input[source(oh, ki, g) * g.width..][..g.width];
                        let orow = &mut out[oh * g.out_w..][..g.out_w];
                        if g.stride == 1 {
                            let first = source(w_lo, kj, g);
                            orow[w_lo..w_hi].copy_from_slice(&irow[first..first + (w_hi - w_lo)]);
                        } else {
                            for ow in w_lo..w_hi {
                                orow[ow] = irow[source(ow, kj, g)];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

/// Adjoint of [`im2col`]: scatters and sums columns back into `N×C×H×W`.
fn col2im<T: WithDType>(src: &[T], batch: usize, g: &Geometry) -> Vec<T> {
    let plane = g.height * g.width;
    let l = g.cols();
    let stride_row = batch * l;
    let mut dst = vec![T::zero(); batch * g.channels * plane];
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            let (h_lo, h_hi) = g.valid(g.out_h, ki, g.height);
            for kj in 0..g.kernel {
                let (w_lo, w_hi) = g.valid(g.out_w, kj, g.width);
                let row = ((c * g.kernel + ki) * g.kernel + kj) * stride_row;
                for b in 0..batch {
                    let cols = &src[row + b * l..][..l];
                    let out = &mut dst[(b * g.channels + c) * plane..][..plane];
                    for oh in h_lo..h_hi {
                        let crow = &cols[oh * g.out_w..][..g.out_w];
                        let orow = &mut out[source(oh, ki, g) * g.width..][..g.width];
                        if g.stride == 1 {
                            let first = source(w_lo, kj, g);
                            for (o, &v) in orow[first..first + (w_hi - w_lo)].iter_mut().zip(&crow[w_lo..w_hi]) {
                                *o += v;
                            }
                        } else {
                            for ow in w_lo..w_hi {
                                orow[source(ow, kj, g)] += crow[ow];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => bail!("im2col/col2im expect contiguous input"),
    }
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.dims()[0];
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous_slice(v, layout)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous_slice(v, layout)?, batch, g)),
            other => bail!("im2col: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, Shape::from((g.rows(), batch * g.cols()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.dims()[1] / g.cols();
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous_slice(v, layout)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous_slice(v, layout)?, batch, g)),
            other => bail!("col2im: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, Shape::from((batch, g.channels, g.height, g.width))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Zero-padded convolution of `x` (`N×C×H×W`) with `weight` (`O×C×k×k`).
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    conv2d_with_bias(x, weight, None, stride, pad)
}

/// [`conv2d`] plus a per-output-channel bias, added while the result is
/// still a `O×(N·L)` matrix.
pub fn conv2d_with_bias(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 {
        bail!("conv2d: weight {:?} incompatible with input {:?}", weight.dims(), x.dims());
    }
    let g = Geometry::new(c, h, w, k, stride, pad)?;
    let cols = if k == 1 && stride == 1 && pad == 0 {
        x.transpose(0, 1)?.contiguous()?.reshape((c, n * h * w))?
    } else {
        x.contiguous()?.apply_op1(Im2Col(g))?
    };
    let mut y = weight.reshape((o, g.rows()))?.matmul(&cols)?;
    if let Some(b) = bias {
        y = y.broadcast_add(&b.reshape((o, 1))?)?;
    }
    y.reshape((o, n, g.out_h, g.out_w))?.transpose(0, 1)?.contiguous()
}

/// Convolution layer with a square kernel and optional bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    /// `kernel`×`kernel` convolution with "same" padding at stride 1.
    pub fn new(p: &Params, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::with_options(p, cin, cout, kernel, stride, kernel / 2, true)
    }

    pub fn with_options(
        p: &Params,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let weight = p.get((cout, cin, kernel, kernel), "weight", Init::Uniform(bound))?;
        let bias = if bias {
            Some(p.get(cout, "bias", Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(conv2d_with_bias(x, &self.weight, self.bias.as_ref(), self.stride, self.pad)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn matches_candle_reference_conv() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 1, 2), (3, 2, 0)] {
            let x = randn(&[2, 3, 9, 7], 1);
            let w = randn(&[4, 3, k, k], 2);
            let ours = conv2d(&x, &w, stride, pad).unwrap();
            let reference = x.conv2d(&w, pad, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            let diff: f64 = (ours - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
            assert!(diff < 1e-12, "k={k} s={stride} p={pad}: {diff}");
        }
    }

    #[test]
    fn gradients_match_candle_reference() {
        // Sizes where the stride divides evenly: candle's own backward pass
        // returns a wrongly shaped input gradient otherwise.
        let x = Var::from_tensor(&randn(&[2, 3, 7, 5], 3)).unwrap();
        let w = Var::from_tensor(&randn(&[4, 3, 3, 3], 4)).unwrap();
        let probe = randn(&[2, 4, 4, 3], 5);
        let ours = conv2d(x.as_tensor(), w.as_tensor(), 2, 1).unwrap();
        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let reference = x.as_tensor().conv2d(w.as_tensor(), 1, 2, 1, 1).unwrap();
        let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &w] {
            let a = g1.get(v.as_tensor()).unwrap();
            let b = g2.get(v.as_tensor()).unwrap();
            let diff: f64 = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
            assert!(diff < 1e-10, "{diff}");
        }
    }

    #[test]
    fn uneven_stride_gradient_matches_finite_differences() {
        let x = randn(&[1, 2, 6, 5], 8);
        let w = randn(&[3, 2, 3, 3], 9);
        let report = crate::oracle::gradcheck_input(|t| Ok(conv2d(t, &w, 2, 1)?), &x, 1).unwrap();
        assert!(report.relative_error < 1e-6, "{report:?}");
    }

    #[test]
    fn single_precision_is_supported() {
        let x = randn(&[1, 2, 4, 4], 6).to_dtype(DType::F32).unwrap();
        let w = randn(&[1, 2, 3, 3], 7).to_dtype(DType::F32).unwrap();
        assert_eq!(conv2d(&x, &w, 1, 1).unwrap().dims(), &[1, 1, 4, 4]);
    }
}
