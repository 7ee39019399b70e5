//! Differentiable building blocks shared by both networks.

mod glci;
mod mlp;
mod nonlocal;
mod scse;
mod spectral;

pub use glci::{BackboneBlock, BlockKind, ConvBlock, FfcBlock, Glci, GlciConfig, GlciVariant};
pub use mlp::{global_partition, local_partition, GlobalMlp, LocalMlp, Partition};
pub use nonlocal::NonLocalBlock;
pub use scse::Scse;
pub use spectral::{irfft2, rfft2, SpectralTransform};

#[cfg(test)]
pub(crate) mod testing {
    use candle_core::{Device, Tensor};
    use rand::{Rng, SeedableRng};

    use crate::nn::Params;

    pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    pub fn zero_param(p: &Params, name: &str) {
        let full = p.full_name(name);
        let var = p
            .all_vars()
            .into_iter()
            .find(|(k, _)| *k == full)
            .unwrap_or_else(|| panic!("no parameter {full}"))
            .1;
        p.set(&full, &var.zeros_like().unwrap()).unwrap();
    }

    pub fn zero_biases(p: &Params) {
        for (name, var) in p.all_vars() {
            if name.ends_with("bias") || name.ends_with("beta") {
                p.set(&name, &var.zeros_like().unwrap()).unwrap();
            }
        }
    }
}
