//! The complete two-stage network, its configuration and checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::BlockKind;
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::stage1::{Stage1Config, Stage1Net, Stage1Output};
use crate::stage2::{PathMode, Stage2Config, Stage2Net, Stage2Output};

/// Ablation variants. At most one applies to a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// #1: stage 1 predicts the watermark-free image directly.
    PredictImage,
    /// #2: the backbones use fast-Fourier-convolution blocks instead of GLCI.
    FfcBlocks,
    /// #3: only the content restoration path.
    RestorationOnly,
    /// #4: only the content imagination path.
    ImaginationOnly,
}

impl Ablation {
    pub fn number(self) -> Option<u8> {
        match self {
            Ablation::None => None,
            Ablation::PredictImage => Some(1),
            Ablation::FfcBlocks => Some(2),
            Ablation::RestorationOnly => Some(3),
            Ablation::ImaginationOnly => Some(4),
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        Ok(match n {
            0 => Ablation::None,
            1 => Ablation::PredictImage,
            2 => Ablation::FfcBlocks,
            3 => Ablation::RestorationOnly,
            4 => Ablation::ImaginationOnly,
            other => return Err(Error::config(format!("unknown ablation #{other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    #[serde(default)]
    pub ablation: Ablation,
}

impl ModelConfig {
    /// Small widths for tests and desk-scale runs: stage-1 widths
    /// `[8, 16, 16, 32, 32]`, stage-2 base width 8, two GLCI blocks and
    /// 4×4 partitions.
    pub fn tiny() -> Self {
        Self {
            stage1: Stage1Config {
                widths: [8, 16, 16, 32, 32],
                refinement_steps: 2,
                predict_clean_image: false,
            },
            stage2: Stage2Config {
                base_width: 8,
                blocks: 2,
                local_block: (4, 4),
                global_grid: (4, 4),
                fusion_width: 8,
                ..Stage2Config::default()
            },
            ablation: Ablation::None,
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    /// Stage configurations with the ablation applied.
    pub fn resolved(&self) -> Result<(Stage1Config, Stage2Config)> {
        let mut s1 = self.stage1.clone();
        let mut s2 = self.stage2.clone();
        if s1.predict_clean_image && self.ablation != Ablation::PredictImage {
            return Err(Error::config("predict_clean_image is set only through ablation #1"));
        }
        if s2.paths != PathMode::Dual || s2.block_kind != BlockKind::Glci {
            return Err(Error::config("path mode and block kind are set only through ablations #2-#4"));
        }
        match self.ablation {
            Ablation::None => {}
            Ablation::PredictImage => s1.predict_clean_image = true,
            Ablation::FfcBlocks => s2.block_kind = BlockKind::Ffc,
            Ablation::RestorationOnly => s2.paths = PathMode::RestorationOnly,
            Ablation::ImaginationOnly => s2.paths = PathMode::ImaginationOnly,
        }
        Ok((s1, s2))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> Result<String> {
        let canonical = serde_json::to_value(self)?;
        Ok(hex::encode(Sha256::digest(canonical.to_string().as_bytes())))
    }
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// `key: expected -> found` for every differing configuration entry.
pub fn config_diff(expected: &ModelConfig, found: &ModelConfig) -> Result<String> {
    let (mut a, mut b) = (BTreeMap::new(), BTreeMap::new());
    flatten("", &serde_json::to_value(expected)?, &mut a);
    flatten("", &serde_json::to_value(found)?, &mut b);
    let keys: std::collections::BTreeSet<_> = a.keys().chain(b.keys()).collect();
    let missing = "<absent>".to_string();
    Ok(keys
        .into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| format!("{k}: {} -> {}", a.get(k).unwrap_or(&missing), b.get(k).unwrap_or(&missing)))
        .collect::<Vec<_>>()
        .join("; "))
}

/// Stage 1 followed by stage 2, with parameters named `stage1.*` and
/// `stage2.*`.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Params,
    stage1: Stage1Net,
    stage2: Stage2Net,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let (s1, s2) = config.resolved()?;
        let params = Params::new(seed, dtype, device);
        Ok(Self {
            config: config.clone(),
            stage1: Stage1Net::new(&params.pp("stage1"), &s1)?,
            stage2: Stage2Net::new(&params.pp("stage2"), &s2)?,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn stage1(&self) -> &Stage1Net {
        &self.stage1
    }

    pub fn stage2(&self) -> &Stage2Net {
        &self.stage2
    }

    pub fn fingerprint(&self) -> Result<String> {
        self.config.fingerprint()
    }

    /// Full forward pass. With `detach_stage1`, no gradient flows from
    /// stage 2 back into stage 1.
    pub fn forward_with(&self, j: &Tensor, detach_stage1: bool) -> Result<(Stage1Output, Stage2Output)> {
        let s1 = self.stage1.forward(j)?;
        let s2 = if detach_stage1 {
            self.stage2.forward(j, &s1.detach())?
        } else {
            self.stage2.forward(j, &s1)?
        };
        Ok((s1, s2))
    }

    pub fn forward(&self, j: &Tensor) -> Result<(Stage1Output, Stage2Output)> {
        self.forward_with(j, false)
    }

    pub fn vars(&self, prefix: &str) -> Vec<(String, Var)> {
        self.params.vars_with_prefix(prefix)
    }

    pub fn stage1_vars(&self) -> Vec<(String, Var)> {
        self.vars("stage1.")
    }

    pub fn stage2_vars(&self) -> Vec<(String, Var)> {
        self.vars("stage2.")
    }

    pub fn all_vars(&self) -> Vec<(String, Var)> {
        self.params.all_vars()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count("")
    }

    /// Copies named tensors into the model. Names not present in the model
    /// are returned; shape mismatches are errors.
    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<Vec<String>> {
        let mut unused = Vec::new();
        let known: HashMap<String, Var> = self.all_vars().into_iter().collect();
        let mut names: Vec<&String> = tensors.keys().collect();
        names.sort();
        for name in names {
            match known.get(name) {
                Some(_) => self.params.set(name, &tensors[name])?,
                None => unused.push(name.clone()),
            }
        }
        Ok(unused)
    }

    /// Imports third-party weights. `rename` maps each foreign tensor name
    /// to a model parameter name, or `None` to skip it. Returns the model
    /// parameters that were not written.
    pub fn import_weights(
        &self,
        path: impl AsRef<Path>,
        rename: impl Fn(&str) -> Option<String>,
    ) -> Result<Vec<String>> {
        let foreign = candle_core::safetensors::load(path.as_ref(), self.device())?;
        let mut mapped = HashMap::new();
        for (name, t) in foreign {
            if let Some(target) = rename(&name) {
                mapped.insert(target, t);
            }
        }
        let unused = self.load_tensors(&mapped)?;
        if let Some(name) = unused.first() {
            return Err(Error::config(format!("import maps onto unknown parameter {name}")));
        }
        Ok(self
            .all_vars()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| !mapped.contains_key(n))
            .collect())
    }
}

/// Where training stood when a checkpoint was written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingState {
    pub step: usize,
    pub epoch: usize,
    pub best_val_psnr: Option<f64>,
    pub seed: u64,
}

/// A checkpoint read from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub fingerprint: String,
    pub state: TrainingState,
    pub tensors: HashMap<String, Tensor>,
}

const META_CONFIG: &str = "config";
const META_FINGERPRINT: &str = "fingerprint";
const META_STATE: &str = "training_state";

fn tensor_bytes(t: &Tensor) -> Result<(safetensors::Dtype, Vec<u8>)> {
    let t = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            safetensors::Dtype::F64,
            t.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            safetensors::Dtype::F32,
            t.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
    })
}

/// Writes every parameter plus the configuration, its fingerprint and the
/// training state into one safetensors file.
pub fn save_checkpoint(model: &Model, state: &TrainingState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let vars = model.all_vars();
    let mut buffers = Vec::with_capacity(vars.len());
    for (name, var) in &vars {
        let (dtype, bytes) = tensor_bytes(var.as_tensor())?;
        buffers.push((name.clone(), dtype, var.as_tensor().dims().to_vec(), bytes));
    }
    let views = buffers
        .iter()
        .map(|(name, dtype, shape, bytes)| Ok((name.clone(), safetensors::tensor::TensorView::new(*dtype, shape.clone(), bytes)?)))
        .collect::<Result<Vec<_>>>()?;
    let metadata = HashMap::from([
        (META_CONFIG.to_string(), model.config().to_json()?),
        (META_FINGERPRINT.to_string(), model.fingerprint()?),
        (META_STATE.to_string(), serde_json::to_string(state)?),
    ]);
    // Write-then-rename so a crash never leaves a truncated checkpoint.
    let tmp = path.with_extension("safetensors.tmp");
    safetensors::serialize_to_file(views, Some(metadata), &tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>, device: &Device) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)?;
    let meta = header.metadata().clone().unwrap_or_default();
    let field = |key: &str| -> Result<&String> {
        meta.get(key).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: format!("checkpoint metadata lacks `{key}`"),
        })
    };
    let config: ModelConfig = serde_json::from_str(field(META_CONFIG)?)?;
    let fingerprint = field(META_FINGERPRINT)?.clone();
    let state: TrainingState = serde_json::from_str(field(META_STATE)?)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    Ok(Checkpoint {
        config,
        fingerprint,
        state,
        tensors,
    })
}

impl Model {
    /// Builds a model from the checkpoint's own configuration.
    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType, device: &Device) -> Result<Self> {
        let model = Self::new(&ckpt.config, ckpt.state.seed, dtype, device)?;
        model.restore(ckpt)?;
        Ok(model)
    }

    /// Loads checkpoint weights, refusing checkpoints built for a different
    /// configuration.
    pub fn restore(&self, ckpt: &Checkpoint) -> Result<()> {
        let expected = self.fingerprint()?;
        if ckpt.fingerprint != expected || ckpt.config.fingerprint()? != expected {
            return Err(Error::FingerprintMismatch {
                expected,
                found: ckpt.fingerprint.clone(),
                diff: config_diff(&self.config, &ckpt.config)?,
            });
        }
        let unused = self.load_tensors(&ckpt.tensors)?;
        if !unused.is_empty() {
            return Err(Error::Format {
                path: Default::default(),
                reason: format!("checkpoint holds unknown tensors: {}", unused.join(", ")),
            });
        }
        let missing: Vec<String> = self
            .all_vars()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| !ckpt.tensors.contains_key(n))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Format {
                path: Default::default(),
                reason: format!("checkpoint lacks tensors: {}", missing.join(", ")),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_forward(model: &Model) -> Tensor {
        let j = Tensor::rand(0f32, 1.0, (1, 3, 16, 16), &Device::Cpu).unwrap();
        model.forward(&j).unwrap().1.fused
    }

    #[test]
    fn ablations_resolve_one_to_one() {
        let base = ModelConfig::tiny();
        let (s1, s2) = base.clone().with_ablation(Ablation::PredictImage).resolved().unwrap();
        assert!(s1.predict_clean_image && s2.paths == PathMode::Dual);
        let (_, s2) = base.clone().with_ablation(Ablation::FfcBlocks).resolved().unwrap();
        assert_eq!(s2.block_kind, BlockKind::Ffc);
        let (_, s2) = base.clone().with_ablation(Ablation::RestorationOnly).resolved().unwrap();
        assert_eq!(s2.paths, PathMode::RestorationOnly);
        let (_, s2) = base.clone().with_ablation(Ablation::ImaginationOnly).resolved().unwrap();
        assert_eq!(s2.paths, PathMode::ImaginationOnly);
        let mut conflicting = base.with_ablation(Ablation::FfcBlocks);
        conflicting.stage2.paths = PathMode::RestorationOnly;
        assert!(conflicting.resolved().is_err());
        for n in 0..=4 {
            assert_eq!(Ablation::from_number(n).unwrap().number().unwrap_or(0), n);
        }
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = ModelConfig::tiny();
        let mut b = a.clone();
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        b.stage2.blocks = 3;
        assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        assert_eq!(config_diff(&a, &b).unwrap(), "stage2.blocks: 2 -> 3");
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let model = Model::new(&ModelConfig::tiny(), 3, DType::F32, &Device::Cpu).unwrap();
        let state = TrainingState {
            step: 5,
            epoch: 1,
            best_val_psnr: Some(20.0),
            seed: 3,
        };
        save_checkpoint(&model, &state, &path).unwrap();
        let ckpt = read_checkpoint(&path, &Device::Cpu).unwrap();
        assert_eq!(ckpt.state, state);
        let other = Model::new(&ModelConfig::tiny(), 99, DType::F32, &Device::Cpu).unwrap();
        other.restore(&ckpt).unwrap();
        let j = Tensor::rand(0f32, 1.0, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let a = model.forward(&j).unwrap().1.fused;
        let b = other.forward(&j).unwrap().1.fused;
        let d: f32 = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(d, 0.0);
        let _ = tiny_forward(&other);

        let mut cfg = ModelConfig::tiny();
        cfg.stage2.blocks = 1;
        let wrong = Model::new(&cfg, 3, DType::F32, &Device::Cpu).unwrap();
        match wrong.restore(&ckpt) {
            Err(Error::FingerprintMismatch { diff, .. }) => assert!(diff.contains("stage2.blocks")),
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn import_hook_renames() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("foreign.safetensors");
        let model = Model::new(&ModelConfig::tiny(), 0, DType::F32, &Device::Cpu).unwrap();
        let (name, var) = model.stage1_vars().into_iter().next().unwrap();
        let replacement = var.as_tensor().ones_like().unwrap();
        let foreign = HashMap::from([("backbone.first".to_string(), replacement.clone())]);
        candle_core::safetensors::save(&foreign, &path).unwrap();
        let target = name.clone();
        let untouched = model
            .import_weights(&path, |n| (n == "backbone.first").then(|| target.clone()))
            .unwrap();
        assert_eq!(untouched.len(), model.all_vars().len() - 1);
        let now = model.all_vars().into_iter().find(|(n, _)| *n == name).unwrap().1;
        let d: f32 = (now.as_tensor() - replacement).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(d, 0.0);
    }
}
