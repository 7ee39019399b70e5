use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{Conv2d, Params};

/// Embedded-Gaussian non-local block with a residual connection.
#[derive(Debug, Clone)]
pub struct NonLocalBlock {
    theta: Conv2d,
    phi: Conv2d,
    value: Conv2d,
    out: Conv2d,
    inner: usize,
}

impl NonLocalBlock {
    pub fn new(p: &Params, channels: usize) -> Result<Self> {
        let inner = (channels / 2).max(1);
        Ok(Self {
            theta: Conv2d::new(&p.pp("theta"), channels, inner, 1, 1)?,
            phi: Conv2d::new(&p.pp("phi"), channels, inner, 1, 1)?,
            value: Conv2d::new(&p.pp("value"), channels, inner, 1, 1)?,
            out: Conv2d::new(&p.pp("out"), inner, channels, 1, 1)?,
            inner,
        })
    }

    /// Row-stochastic `N×HW×HW` affinity matrix (query rows, key columns).
    pub fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = x.dims4()?;
        let q = self.theta.forward(x)?.reshape((n, self.inner, h * w))?.transpose(1, 2)?.contiguous()?;
        let k = self.phi.forward(x)?.reshape((n, self.inner, h * w))?;
        let logits = q.matmul(&k)?;
        Ok(candle_nn::ops::softmax(&logits, 2)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = x.dims4()?;
        let attn = self.attention(x)?;
        let v = self.value.forward(x)?.reshape((n, self.inner, h * w))?.transpose(1, 2)?.contiguous()?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((n, self.inner, h, w))?;
        Ok((x + self.out.forward(&y)?)?)
    }

    /// Parameters exposed for reference implementations: `(theta, phi, value,
    /// out)` weight and bias pairs.
    pub fn projections(&self) -> [&Conv2d; 4] {
        [&self.theta, &self.phi, &self.value, &self.out]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::testing::random_tensor;
    use crate::oracle::{nonlocal_attention, nonlocal_forward, Nchw};
    use candle_core::{DType, Device};

    fn block(seed: u64) -> NonLocalBlock {
        NonLocalBlock::new(&Params::new(seed, DType::F64, &Device::Cpu), 4).unwrap()
    }

    #[test]
    fn matches_brute_force_attention() {
        let b = block(1);
        let x = random_tensor(&[2, 4, 3, 5], 2);
        let xo = Nchw::from_tensor(&x).unwrap();
        let got: Vec<f64> = b.attention(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let want = nonlocal_attention(&b, &xo).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
        let y = Nchw::from_tensor(&b.forward(&x).unwrap()).unwrap();
        let yo = nonlocal_forward(&b, &xo).unwrap();
        for (g, w) in y.data.iter().zip(&yo.data) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let a = block(3).attention(&random_tensor(&[1, 4, 4, 4], 4)).unwrap();
        let sums: Vec<f64> = a.sum(2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(sums.len(), 16);
        for s in sums {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_input_gives_uniform_attention() {
        let x = Tensor::full(0.3f64, (1, 4, 3, 3), &Device::Cpu).unwrap();
        let b = block(5);
        let a: Vec<f64> = b.attention(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for v in a {
            assert!((v - 1.0 / 9.0).abs() < 1e-12);
        }
        // Every position receives the same update.
        let y: Vec<f64> = b.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for c in 0..4 {
            let plane = &y[c * 9..(c + 1) * 9];
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
    }
}
