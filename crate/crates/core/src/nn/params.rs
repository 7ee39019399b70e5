use std::sync::Arc;

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Initial value distribution for a new parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Const(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

struct Store {
    map: VarMap,
    seed: u64,
    dtype: DType,
    device: Device,
}

/// Hierarchically named, seeded parameter store.
///
/// Every parameter draws its initial values from a generator seeded by
/// `(seed, full name)`, so a model's initialization does not depend on the
/// order in which its layers are constructed.
#[derive(Clone)]
pub struct Params {
    store: Arc<Store>,
    prefix: String,
}

impl std::fmt::Debug for Params {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Params")
            .field("prefix", &self.prefix)
            .field("seed", &self.store.seed)
            .field("dtype", &self.store.dtype)
            .finish_non_exhaustive()
    }
}

impl Params {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            store: Arc::new(Store {
                map: VarMap::new(),
                seed,
                dtype,
                device: device.clone(),
            }),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Self {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn varmap(&self) -> &VarMap {
        &self.store.map
    }

    pub fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Returns the named parameter, creating it on first use.
    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        let shape = shape.into();
        let full = self.full_name(name);
        let data = self.store.map.data();
        let mut vars = data.lock().expect("parameter store poisoned");
        if let Some(var) = vars.get(&full) {
            if var.shape() != &shape {
                return Err(Error::contract(format!(
                    "parameter {full} has shape {:?}, requested {:?}",
                    var.shape(),
                    shape
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Const(v) => vec![v; n],
            Init::Uniform(bound) => {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.store.seed, &full));
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        vars.insert(full, var);
        Ok(out)
    }

    /// All variables whose name starts with `prefix`, sorted by name.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        let data = self.store.map.data().lock().expect("parameter store poisoned");
        let mut out: Vec<(String, Var)> = data
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn all_vars(&self) -> Vec<(String, Var)> {
        self.vars_with_prefix("")
    }

    pub fn parameter_count(&self, prefix: &str) -> usize {
        self.vars_with_prefix(prefix)
            .iter()
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Overwrites an existing parameter in place.
    pub fn set(&self, full_name: &str, value: &Tensor) -> Result<()> {
        let data = self.store.map.data().lock().expect("parameter store poisoned");
        let var = data
            .get(full_name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {full_name}")))?;
        if var.shape() != value.shape() {
            return Err(Error::contract(format!(
                "shape mismatch for {full_name}: {:?} vs {:?}",
                var.shape(),
                value.shape()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest length"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initialization_is_order_independent() {
        let a = Params::new(3, DType::F64, &Device::Cpu);
        let x1 = a.pp("x").get(4, "w", Init::Uniform(1.0)).unwrap();
        let _ = a.pp("y").get(4, "w", Init::Uniform(1.0)).unwrap();
        let b = Params::new(3, DType::F64, &Device::Cpu);
        let _ = b.pp("y").get(4, "w", Init::Uniform(1.0)).unwrap();
        let x2 = b.pp("x").get(4, "w", Init::Uniform(1.0)).unwrap();
        let v1: Vec<f64> = x1.to_vec1().unwrap();
        let v2: Vec<f64> = x2.to_vec1().unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn repeated_get_returns_same_var() {
        let p = Params::new(0, DType::F32, &Device::Cpu);
        p.get((2, 2), "w", Init::Const(1.5)).unwrap();
        let again = p.get((2, 2), "w", Init::Const(0.0)).unwrap();
        assert_eq!(again.sum_all().unwrap().to_scalar::<f32>().unwrap(), 6.0);
        assert!(p.get((3, 2), "w", Init::Const(0.0)).is_err());
        assert_eq!(p.parameter_count(""), 4);
    }
}
