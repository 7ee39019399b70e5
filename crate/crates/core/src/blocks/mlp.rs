//! Axis MLPs over a patch partition of the feature map.
//!
//! The local MLP mixes pixel positions *inside* each `b_h×b_w` patch; the
//! global MLP splits the map into a `g_h×g_w` grid of cells and mixes the
//! *same* position across all cells. In both cases the mixing weights are
//! shared across channels and across the untouched axis, and the result is
//! added back to the input.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{crop, reflect_pad_to_multiple, Linear, Params};

/// How a feature map of a given size is cut into patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Partition {
    /// Number of patches along height and width.
    pub grid: (usize, usize),
    /// Size of each patch in pixels.
    pub patch: (usize, usize),
}

impl Partition {
    pub fn count(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Partition used by the local MLP: fixed patch size.
pub fn local_partition(height: usize, width: usize, block: (usize, usize)) -> Result<Partition> {
    check_divisible(height, width, block, "local block")?;
    Ok(Partition {
        grid: (height / block.0, width / block.1),
        patch: block,
    })
}

/// Partition used by the global MLP: fixed number of cells.
pub fn global_partition(height: usize, width: usize, grid: (usize, usize)) -> Result<Partition> {
    check_divisible(height, width, grid, "global grid")?;
    Ok(Partition {
        grid,
        patch: (height / grid.0, width / grid.1),
    })
}

fn check_divisible(h: usize, w: usize, by: (usize, usize), what: &str) -> Result<()> {
    if by.0 == 0 || by.1 == 0 || h % by.0 != 0 || w % by.1 != 0 {
        return Err(Error::contract(format!(
            "{h}x{w} feature not divisible by {what} {}x{}",
            by.0, by.1
        )));
    }
    Ok(())
}

/// Two-layer perceptron with GELU and an outer residual connection.
#[derive(Debug, Clone)]
struct AxisMlp {
    fc1: Linear,
    fc2: Linear,
}

impl AxisMlp {
    fn new(p: &Params, dim: usize, hidden_ratio: usize) -> Result<Self> {
        let hidden = (dim * hidden_ratio).max(1);
        Ok(Self {
            fc1: Linear::new(&p.pp("fc1"), dim, hidden)?,
            fc2: Linear::new(&p.pp("fc2"), hidden, dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(x)?.gelu_erf()?;
        Ok((x + self.fc2.forward(&h)?)?)
    }
}

/// Mixes positions within each `block` patch.
#[derive(Debug, Clone)]
pub struct LocalMlp {
    block: (usize, usize),
    mlp: AxisMlp,
}

impl LocalMlp {
    pub fn new(p: &Params, block: (usize, usize), hidden_ratio: usize) -> Result<Self> {
        Ok(Self {
            block,
            mlp: AxisMlp::new(p, block.0 * block.1, hidden_ratio)?,
        })
    }

    pub fn block(&self) -> (usize, usize) {
        self.block
    }

    /// Applies the MLP to a map whose size is already a multiple of the block.
    pub fn forward_exact(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let part = local_partition(h, w, self.block)?;
        let (gh, gw) = part.grid;
        let (bh, bw) = part.patch;
        let patches = x
            .reshape((n * c, gh, bh, gw, bw))?
            .permute((0, 1, 3, 2, 4))?
            .contiguous()?
            .reshape((n * c * gh * gw, bh * bw))?;
        let mixed = self.mlp.forward(&patches)?;
        Ok(mixed
            .reshape((n * c, gh, gw, bh, bw))?
            .permute((0, 1, 3, 2, 4))?
            .contiguous()?
            .reshape((n, c, h, w))?)
    }

    /// Reflection-pads to a multiple of the block, mixes, and crops back.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let padded = reflect_pad_to_multiple(x, self.block.0, self.block.1)?;
        crop(&self.forward_exact(&padded)?, h, w)
    }
}

/// Mixes corresponding positions across the cells of a `grid`.
#[derive(Debug, Clone)]
pub struct GlobalMlp {
    grid: (usize, usize),
    mlp: AxisMlp,
}

impl GlobalMlp {
    pub fn new(p: &Params, grid: (usize, usize), hidden_ratio: usize) -> Result<Self> {
        Ok(Self {
            grid,
            mlp: AxisMlp::new(p, grid.0 * grid.1, hidden_ratio)?,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn forward_exact(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let part = global_partition(h, w, self.grid)?;
        let (gh, gw) = part.grid;
        let (ph, pw) = part.patch;
        let cells = x
            .reshape((n * c, gh, ph, gw, pw))?
            .permute((0, 2, 4, 1, 3))?
            .contiguous()?
            .reshape((n * c * ph * pw, gh * gw))?;
        let mixed = self.mlp.forward(&cells)?;
        Ok(mixed
            .reshape((n * c, ph, pw, gh, gw))?
            .permute((0, 3, 1, 4, 2))?
            .contiguous()?
            .reshape((n, c, h, w))?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let padded = reflect_pad_to_multiple(x, self.grid.0, self.grid.1)?;
        crop(&self.forward_exact(&padded)?, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::testing::{random_tensor, zero_param};
    use candle_core::{DType, Device};

    fn max_abs(t: &Tensor) -> f64 {
        t.abs().unwrap().max_all().unwrap().to_scalar().unwrap()
    }

    #[test]
    fn six_by_four_partitions() {
        let local = local_partition(6, 4, (2, 2)).unwrap();
        assert_eq!(local.count(), 6);
        assert_eq!(local.patch, (2, 2));
        let global = global_partition(6, 4, (2, 2)).unwrap();
        assert_eq!(global.count(), 4);
        assert_eq!(global.patch, (3, 2));
    }

    #[test]
    fn indivisible_exact_forward_is_contract_error() {
        let p = Params::new(0, DType::F64, &Device::Cpu);
        let mlp = LocalMlp::new(&p, (2, 2), 2).unwrap();
        let x = random_tensor(&[1, 2, 5, 4], 1);
        assert!(matches!(mlp.forward_exact(&x), Err(Error::Contract(_))));
        assert_eq!(mlp.forward(&x).unwrap().dims(), &[1, 2, 5, 4]);
    }

    #[test]
    fn zeroed_output_layer_gives_identity() {
        let p = Params::new(0, DType::F64, &Device::Cpu);
        let local = LocalMlp::new(&p.pp("l"), (2, 2), 2).unwrap();
        let global = GlobalMlp::new(&p.pp("g"), (2, 2), 2).unwrap();
        for name in ["l.fc2.weight", "l.fc2.bias", "g.fc2.weight", "g.fc2.bias"] {
            zero_param(&p, name);
        }
        let x = random_tensor(&[2, 3, 6, 4], 2);
        assert!(max_abs(&(local.forward(&x).unwrap() - &x).unwrap()) == 0.0);
        assert!(max_abs(&(global.forward(&x).unwrap() - &x).unwrap()) == 0.0);
    }

    #[test]
    fn swapping_patches_swaps_outputs() {
        let p = Params::new(5, DType::F64, &Device::Cpu);
        let local = LocalMlp::new(&p, (2, 2), 2).unwrap();
        let x = random_tensor(&[1, 2, 4, 4], 3);
        // exchange the top-left and bottom-right 2×2 patches
        let swap = |t: &Tensor| -> Tensor {
            let top = t.narrow(2, 0, 2).unwrap();
            let bottom = t.narrow(2, 2, 2).unwrap();
            let tl = top.narrow(3, 0, 2).unwrap();
            let tr = top.narrow(3, 2, 2).unwrap();
            let bl = bottom.narrow(3, 0, 2).unwrap();
            let br = bottom.narrow(3, 2, 2).unwrap();
            let new_top = Tensor::cat(&[&br, &tr], 3).unwrap();
            let new_bottom = Tensor::cat(&[&bl, &tl], 3).unwrap();
            Tensor::cat(&[&new_top, &new_bottom], 2).unwrap()
        };
        let a = local.forward(&swap(&x)).unwrap();
        let b = swap(&local.forward(&x).unwrap());
        assert!(max_abs(&(a - b).unwrap()) < 1e-12);
    }

    #[test]
    fn global_impulse_reaches_every_cell() {
        let p = Params::new(9, DType::F64, &Device::Cpu);
        let global = GlobalMlp::new(&p, (2, 2), 2).unwrap();
        let base = random_tensor(&[1, 1, 6, 4], 4);
        let mut bumped: Vec<f64> = base.flatten_all().unwrap().to_vec1().unwrap();
        bumped[0] += 1.0; // position (0,0) of cell (0,0)
        let bumped = Tensor::from_vec(bumped, (1, 1, 6, 4), &Device::Cpu).unwrap();
        let delta = (global.forward(&bumped).unwrap() - global.forward(&base).unwrap()).unwrap();
        let d: Vec<f64> = delta.flatten_all().unwrap().to_vec1().unwrap();
        // the same in-cell position (0,0) of each 3×2 cell
        for idx in [0usize, 2, 3 * 4, 3 * 4 + 2] {
            assert!(d[idx].abs() > 1e-9, "cell origin {idx} unaffected");
        }
        // other in-cell positions untouched
        assert!(d[1].abs() < 1e-15);
    }
}
