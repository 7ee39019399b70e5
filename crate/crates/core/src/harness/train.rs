use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::evaluate::evaluate_source;
use crate::error::{Error, Result};
use crate::imaging::{images_to_tensor, maps_to_tensor};
use crate::losses::{stage1_loss, total_loss, LossBreakdown, LossTargets, LossWeights, TotalLoss};
use crate::metrics::MetricsReport;
use crate::model::{save_checkpoint, Model, TrainingState};
use crate::perceptual::PerceptualExtractor;
use crate::synthesis::{Dataset, ManifestEntry, Sample};

pub const STEP_LOG: &str = "steps.jsonl";
pub const RUN_RECORD: &str = "run_record.json";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const NAN_DUMP: &str = "nonfinite_batch.json";

/// Random access to identified samples.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<(String, Sample)>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for Vec<(String, Sample)> {
    fn len(&self) -> usize {
        <[_]>::len(self)
    }

    fn load(&self, index: usize) -> Result<(String, Sample)> {
        Ok(self[index].clone())
    }
}

/// One split of an on-disk dataset.
pub struct SplitSource<'a> {
    dataset: &'a Dataset,
    entries: Vec<&'a ManifestEntry>,
}

impl<'a> SplitSource<'a> {
    pub fn new(dataset: &'a Dataset, split: &str) -> Self {
        Self {
            dataset,
            entries: dataset.entries(split),
        }
    }

    /// Keeps the first `n` entries (all when `n` is 0).
    pub fn truncated(mut self, n: usize) -> Self {
        if n > 0 {
            self.entries.truncate(n);
        }
        self
    }
}

impl SampleSource for SplitSource<'_> {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn load(&self, index: usize) -> Result<(String, Sample)> {
        let entry = self.entries[index];
        Ok((entry.id.clone(), self.dataset.load(entry)?))
    }
}

/// A stacked mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub j: Tensor,
    pub targets: LossTargets,
}

impl Batch {
    pub fn from_samples(samples: &[(String, Sample)], dtype: DType, device: &Device) -> Result<Self> {
        let j = images_to_tensor(&samples.iter().map(|(_, s)| &s.j).collect::<Vec<_>>(), dtype, device)?;
        let i = images_to_tensor(&samples.iter().map(|(_, s)| &s.i).collect::<Vec<_>>(), dtype, device)?;
        let a = maps_to_tensor(
            &samples.iter().map(|(_, s)| s.alpha.data()).collect::<Vec<_>>(),
            dtype,
            device,
        )?;
        Ok(Self {
            ids: samples.iter().map(|(id, _)| id.clone()).collect(),
            j,
            targets: LossTargets::from_background_and_alpha(&i, &a)?,
        })
    }

    pub fn load(source: &dyn SampleSource, indices: &[usize], dtype: DType, device: &Device) -> Result<Self> {
        let samples = indices.iter().map(|&i| source.load(i)).collect::<Result<Vec<_>>>()?;
        Self::from_samples(&samples, dtype, device)
    }
}

/// Which parameters an optimizer step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Both stages under the total loss.
    Joint,
    /// Stage 1 alone under `L_b + λ3·L_m`.
    Stage1,
    /// Stage 2 under the total loss, with stage 1 frozen.
    Stage2,
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }
}

/// Model, loss and optimizer state for stepwise training.
pub struct Trainer {
    model: Model,
    extractor: PerceptualExtractor,
    weights: LossWeights,
    adam: AdamSettings,
    optimizer: Option<(Phase, AdamW)>,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model, extractor: PerceptualExtractor, weights: LossWeights, adam: AdamSettings) -> Result<Self> {
        weights.validate()?;
        Ok(Self {
            model,
            extractor,
            weights,
            adam,
            optimizer: None,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn extractor(&self) -> &PerceptualExtractor {
        &self.extractor
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Forward pass and loss without updating anything.
    pub fn loss(&self, batch: &Batch, phase: Phase) -> Result<TotalLoss> {
        match phase {
            Phase::Stage1 => {
                let s1 = self.model.stage1().forward(&batch.j)?;
                stage1_loss(&batch.targets, &s1, &self.weights, &self.extractor)
            }
            Phase::Joint | Phase::Stage2 => {
                let (s1, s2) = self.model.forward_with(&batch.j, phase == Phase::Stage2)?;
                total_loss(&batch.targets, &s1, &s2, &self.weights, &self.extractor)
            }
        }
    }

    fn optimizer(&mut self, phase: Phase) -> Result<&mut AdamW> {
        if self.optimizer.as_ref().map(|(p, _)| *p) != Some(phase) {
            let vars = match phase {
                Phase::Joint => self.model.all_vars(),
                Phase::Stage1 => self.model.stage1_vars(),
                Phase::Stage2 => self.model.stage2_vars(),
            };
            let params = ParamsAdamW {
                lr: self.adam.learning_rate,
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                eps: self.adam.eps,
                weight_decay: 0.0,
            };
            let opt = AdamW::new(vars.into_iter().map(|(_, v)| v).collect(), params)?;
            self.optimizer = Some((phase, opt));
        }
        Ok(&mut self.optimizer.as_mut().expect("just set").1)
    }

    /// One Adam step. A non-finite loss aborts before any parameter changes.
    pub fn train_step(&mut self, batch: &Batch, phase: Phase) -> Result<LossBreakdown> {
        let loss = self.loss(batch, phase)?;
        let breakdown = loss.breakdown()?;
        if !breakdown.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                batch_ids: batch.ids.clone(),
            });
        }
        self.optimizer(phase)?.backward_step(&loss.total)?;
        self.step += 1;
        Ok(breakdown)
    }
}

/// Loss terms logged after one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total_loss: f64,
    pub validation: Option<MetricsReport>,
}

/// Everything needed to re-create and audit a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub model_fingerprint: String,
    pub source_fingerprint: String,
    pub parameter_count: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_seconds: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub best_val_psnr: Option<f64>,
}

impl RunRecord {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Crate version plus the git revision of the working directory when one is
/// available.
pub fn source_fingerprint() -> String {
    let rev = std::process::Command::new("git")
        .args(["rev-parse", "--short=12", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty());
    match rev {
        Some(rev) => format!("rirci-core {} git {rev}", env!("CARGO_PKG_VERSION")),
        None => format!("rirci-core {}", env!("CARGO_PKG_VERSION")),
    }
}

/// Sample order for `epoch`, a pure function of the seed.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

fn phase_for(cfg: &TrainConfig, epoch: usize) -> Phase {
    match (cfg.two_phase, epoch < cfg.stage1_epochs) {
        (false, _) => Phase::Joint,
        (true, true) => Phase::Stage1,
        (true, false) => Phase::Stage2,
    }
}

/// Builds the model and perceptual extractor described by `cfg`.
pub fn build(cfg: &TrainConfig, dtype: DType, device: &Device) -> Result<(Model, PerceptualExtractor)> {
    let model = Model::new(&cfg.model_config()?, cfg.seed, dtype, device)?;
    let extractor = PerceptualExtractor::new(&cfg.perceptual_config(), dtype, device)?;
    Ok((model, extractor))
}

/// Trains on the manifest named in `cfg` and writes logs and checkpoints to
/// `cfg.output_dir`.
pub fn train(cfg: &TrainConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let dataset = Dataset::open(&cfg.manifest)?;
    dataset.manifest().validate(dataset.root())?;
    let train_set = SplitSource::new(&dataset, "train");
    let val_set = SplitSource::new(&dataset, "val").truncated(cfg.val_samples);
    let (model, extractor) = build(cfg, DType::F32, &Device::Cpu)?;
    train_with(cfg, model, extractor, &train_set, Some(&val_set), Some(&cfg.output_dir)).map(|(r, _)| r)
}

/// The training loop over arbitrary sources. Without `out_dir` nothing is
/// written to disk. Returns the record and the trained model.
pub fn train_with(
    cfg: &TrainConfig,
    model: Model,
    extractor: PerceptualExtractor,
    train_set: &dyn SampleSource,
    val_set: Option<&dyn SampleSource>,
    out_dir: Option<&Path>,
) -> Result<(RunRecord, Model)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let started = Instant::now();
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(STEP_LOG);
            Some(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?)
        }
        None => None,
    };
    let mut record = RunRecord {
        config: cfg.clone(),
        model_fingerprint: model.fingerprint()?,
        source_fingerprint: source_fingerprint(),
        parameter_count: model.parameter_count(),
        steps: Vec::new(),
        epochs: Vec::new(),
        wall_clock_seconds: 0.0,
        best_checkpoint: None,
        best_val_psnr: None,
    };
    let (dtype, device) = (model.dtype(), model.device().clone());
    let mut trainer = Trainer::new(model, extractor, cfg.loss_weights(), AdamSettings::from_config(cfg))?;

    'epochs: for epoch in 0..cfg.epochs {
        let phase = phase_for(cfg, epoch);
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for indices in order.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && trainer.step() >= cfg.max_steps {
                break;
            }
            let batch = Batch::load(train_set, indices, dtype, &device)?;
            let loss = match trainer.train_step(&batch, phase) {
                Ok(loss) => loss,
                Err(err @ Error::NonFiniteLoss { .. }) => {
                    if let Some(dir) = out_dir {
                        dump_batch(dir, trainer.step(), epoch, &batch.ids)?;
                    }
                    return Err(err);
                }
                Err(err) => return Err(err),
            };
            let entry = StepRecord {
                step: trainer.step() - 1,
                epoch,
                phase,
                loss,
            };
            if let Some(file) = log.as_mut() {
                writeln!(file, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(STEP_LOG, e))?;
            }
            if cfg.log_every > 0 && entry.step % cfg.log_every == 0 {
                log::info!(
                    "epoch {epoch} step {} L={:.6} L_b={:.4} L_r={:.4} L_i={:.4} L_f={:.4} L_m={:.4}",
                    entry.step,
                    loss.total,
                    loss.l_b,
                    loss.l_r,
                    loss.l_i,
                    loss.l_f,
                    loss.l_m
                );
            }
            epoch_loss += loss.total;
            epoch_steps += 1;
            record.steps.push(entry);
        }
        if epoch_steps == 0 {
            break 'epochs;
        }

        let validation = match val_set.filter(|v| !v.is_empty()) {
            Some(v) => Some(evaluate_source(Some(trainer.model()), v, cfg.batch_size)?.0),
            None => None,
        };
        let state = TrainingState {
            step: trainer.step(),
            epoch: epoch + 1,
            best_val_psnr: record.best_val_psnr,
            seed: cfg.seed,
        };
        if let (Some(dir), Some(report)) = (out_dir, &validation) {
            if record.best_val_psnr.is_none_or(|b| report.psnr > b) {
                record.best_val_psnr = Some(report.psnr);
                let path = dir.join(BEST_CHECKPOINT);
                let state = TrainingState {
                    best_val_psnr: Some(report.psnr),
                    ..state.clone()
                };
                save_checkpoint(trainer.model(), &state, &path)?;
                record.best_checkpoint = Some(path);
            }
        }
        let last_epoch = epoch + 1 == cfg.epochs || (cfg.max_steps > 0 && trainer.step() >= cfg.max_steps);
        if let Some(dir) = out_dir {
            if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) || last_epoch {
                save_checkpoint(trainer.model(), &state, dir.join(LAST_CHECKPOINT))?;
            }
        }
        record.epochs.push(EpochRecord {
            epoch,
            steps: epoch_steps,
            mean_total_loss: epoch_loss / epoch_steps as f64,
            validation,
        });
        if last_epoch {
            break;
        }
    }

    record.wall_clock_seconds = started.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        record.save(dir.join(RUN_RECORD))?;
    }
    Ok((record, trainer.into_model()))
}

fn dump_batch(dir: &Path, step: usize, epoch: usize, ids: &[String]) -> Result<()> {
    let path = dir.join(NAN_DUMP);
    let body = serde_json::json!({ "step": step, "epoch": epoch, "batch_ids": ids });
    std::fs::write(&path, serde_json::to_string_pretty(&body)?).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ModelPreset;
    use crate::synthesis::{procedural, synthesize_sample, SynthesisConfig};

    pub(crate) fn samples(n: usize, size: usize, seed: u64) -> Vec<(String, Sample)> {
        let config = SynthesisConfig {
            canvas: (size, size),
            ..SynthesisConfig::default()
        };
        let assets: Vec<_> = (0..2).map(|i| procedural::watermark(seed, i, size / 2, size / 2)).collect();
        (0..n)
            .map(|i| {
                let bg = procedural::background(seed, i as u64, size, size);
                let (_, s) = synthesize_sample(&bg, &assets, &config, seed, i as u64).unwrap();
                (format!("s{i:03}"), s)
            })
            .collect()
    }

    fn smoke_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            max_steps: 2,
            model_preset: ModelPreset::Tiny,
            perceptual_widths: [4, 8, 8],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(20, 3, 0);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(20, 3, 0));
        assert_ne!(a, epoch_order(20, 3, 1));
        assert_ne!(a, epoch_order(20, 4, 0));
    }

    #[test]
    fn two_step_smoke_run_logs_two_entries() {
        let data = samples(8, 16, 1);
        let cfg = smoke_config();
        let dir = tempfile::tempdir().unwrap();
        let (model, ext) = build(&cfg, DType::F32, &Device::Cpu).unwrap();
        let (record, _) = train_with(&cfg, model, ext, &data, Some(&data[..2].to_vec()), Some(dir.path())).unwrap();
        assert_eq!(record.steps.len(), 2);
        assert!(record.steps.iter().all(|s| s.loss.total.is_finite()));
        let log = std::fs::read_to_string(dir.path().join(STEP_LOG)).unwrap();
        assert_eq!(log.lines().count(), 2);
        assert!(log.contains("\"L_b\""));
        assert!(dir.path().join(LAST_CHECKPOINT).exists());
        assert!(dir.path().join(BEST_CHECKPOINT).exists());
        let back = RunRecord::load(dir.path().join(RUN_RECORD)).unwrap();
        assert_eq!(back.steps, record.steps);
        assert_eq!(back.config, cfg);
    }

    #[test]
    fn same_seed_gives_same_step_zero_loss() {
        let data = samples(4, 16, 2);
        let cfg = TrainConfig {
            max_steps: 1,
            ..smoke_config()
        };
        let run = || {
            let (model, ext) = build(&cfg, DType::F32, &Device::Cpu).unwrap();
            train_with(&cfg, model, ext, &data, None, None).unwrap().0.steps[0].loss.total
        };
        assert_eq!(format!("{:.6}", run()), format!("{:.6}", run()));
    }

    #[test]
    fn two_phase_freezes_stage1_after_its_epochs() {
        let data = samples(2, 16, 3);
        let cfg = TrainConfig {
            epochs: 2,
            stage1_epochs: 1,
            two_phase: true,
            batch_size: 2,
            max_steps: 0,
            ..smoke_config()
        };
        let (model, ext) = build(&cfg, DType::F32, &Device::Cpu).unwrap();
        let before: Vec<Tensor> = model.stage1_vars().iter().map(|(_, v)| v.as_tensor().copy().unwrap()).collect();
        let mut trainer = Trainer::new(model, ext, cfg.loss_weights(), AdamSettings::from_config(&cfg)).unwrap();
        let batch = Batch::from_samples(&data, DType::F32, &Device::Cpu).unwrap();
        let l = trainer.train_step(&batch, Phase::Stage2).unwrap();
        assert!(l.l_f > 0.0);
        let after = trainer.model().stage1_vars();
        for (b, (_, a)) in before.iter().zip(after.iter()) {
            let d: f32 = (b - a.as_tensor()).unwrap().abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
            assert_eq!(d, 0.0);
        }
        let l = trainer.train_step(&batch, Phase::Stage1).unwrap();
        assert_eq!((l.l_r, l.l_i, l.l_f), (0.0, 0.0, 0.0));
        assert_eq!(phase_for(&cfg, 0), Phase::Stage1);
        assert_eq!(phase_for(&cfg, 1), Phase::Stage2);
    }

    #[test]
    fn nonfinite_loss_names_the_batch() {
        let data = samples(2, 16, 4);
        let cfg = smoke_config();
        let (model, ext) = build(&cfg, DType::F32, &Device::Cpu).unwrap();
        let mut trainer = Trainer::new(model, ext, cfg.loss_weights(), AdamSettings::from_config(&cfg)).unwrap();
        let mut batch = Batch::from_samples(&data, DType::F32, &Device::Cpu).unwrap();
        batch.targets.background = (batch.targets.background * f64::NAN).unwrap();
        match trainer.train_step(&batch, Phase::Joint) {
            Err(Error::NonFiniteLoss { step, batch_ids }) => {
                assert_eq!(step, 0);
                assert_eq!(batch_ids, vec!["s000".to_string(), "s001".to_string()]);
            }
            other => panic!("expected a non-finite loss error, got {other:?}"),
        }
    }
}
