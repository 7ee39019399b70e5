//! Small end-to-end training experiments used for acceptance: overfitting a
//! handful of samples, and comparing the two-path model against its
//! single-path variants under equal budgets.

use std::time::Instant;

use candle_core::{DType, Device};
use serde::Serialize;

use super::config::TrainConfig;
use super::evaluate::evaluate_source;
use super::selftest::{smoke_config, synthetic_samples};
use super::train::{build, epoch_order, AdamSettings, Batch, Phase, Trainer};
use crate::error::Result;
use crate::metrics::MetricsReport;

#[derive(Debug, Clone)]
pub struct OverfitOptions {
    pub samples: usize,
    pub size: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Stop once training PSNR reaches this and exceeds the untrained model
    /// by `margin_db`.
    pub target_psnr: f64,
    pub margin_db: f64,
    pub seed: u64,
}

impl Default for OverfitOptions {
    fn default() -> Self {
        Self {
            samples: 16,
            size: 64,
            batch_size: 8,
            max_steps: 2000,
            eval_every: 50,
            target_psnr: 30.0,
            margin_db: 8.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OverfitReport {
    pub untrained: MetricsReport,
    /// Training-set metrics after the given number of steps.
    pub trace: Vec<(usize, MetricsReport)>,
    pub steps: usize,
    pub seconds: f64,
}

impl OverfitReport {
    pub fn last(&self) -> &MetricsReport {
        self.trace.last().map(|(_, r)| r).unwrap_or(&self.untrained)
    }

    pub fn gain_db(&self) -> f64 {
        self.last().psnr - self.untrained.psnr
    }

    /// Final masked-region RMSE is below its step-0 value.
    pub fn rmse_w_decreased(&self) -> bool {
        matches!((self.untrained.rmse_w, self.last().rmse_w), (Some(a), Some(b)) if b < a)
    }
}

/// Configuration shared by the experiments: tiny model, published optimizer
/// settings, small perceptual extractor.
pub fn experiment_config(seed: u64, batch_size: usize, ablation: u8) -> TrainConfig {
    TrainConfig {
        batch_size,
        ablation,
        ..smoke_config(seed)
    }
}

fn batches(len: usize, batch_size: usize, seed: u64) -> impl Iterator<Item = Vec<usize>> {
    (0..).flat_map(move |epoch| {
        epoch_order(len, seed, epoch)
            .chunks(batch_size)
            .map(<[usize]>::to_vec)
            .collect::<Vec<_>>()
    })
}

/// Trains the tiny model on a few synthetic samples until it fits them or
/// runs out of steps.
pub fn tiny_overfit(opts: &OverfitOptions) -> Result<OverfitReport> {
    let started = Instant::now();
    let data = synthetic_samples(opts.samples, opts.size, (0.5, 1.0), opts.seed)?;
    let cfg = experiment_config(opts.seed, opts.batch_size, 0);
    let (model, extractor) = build(&cfg, DType::F32, &Device::Cpu)?;
    let untrained = evaluate_source(Some(&model), &data, opts.batch_size)?.0;
    let mut trainer = Trainer::new(model, extractor, cfg.loss_weights(), AdamSettings::from_config(&cfg))?;
    let mut trace = Vec::new();
    for indices in batches(data.len(), opts.batch_size, opts.seed) {
        if trainer.step() >= opts.max_steps {
            break;
        }
        let batch = Batch::load(&data, &indices, DType::F32, &Device::Cpu)?;
        trainer.train_step(&batch, Phase::Joint)?;
        let step = trainer.step();
        if step % opts.eval_every.max(1) == 0 || step == opts.max_steps {
            let report = evaluate_source(Some(trainer.model()), &data, opts.batch_size)?.0;
            log::info!("overfit step {step}: PSNR {:.2} dB, RMSE_w {:?}", report.psnr, report.rmse_w);
            let done = report.psnr >= opts.target_psnr && report.psnr - untrained.psnr >= opts.margin_db;
            trace.push((step, report));
            if done {
                break;
            }
        }
    }
    Ok(OverfitReport {
        untrained,
        trace,
        steps: trainer.step(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone)]
pub struct AblationOptions {
    pub samples: usize,
    /// Held out from `samples` for validation.
    pub val_samples: usize,
    pub size: usize,
    pub opacity: (f64, f64),
    pub steps: usize,
    pub batch_size: usize,
    pub variants: Vec<u8>,
    pub seed: u64,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            samples: 500,
            val_samples: 50,
            size: 64,
            opacity: (0.1, 1.0),
            steps: 600,
            batch_size: 8,
            variants: vec![0, 3, 4],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationResult {
    pub variant: u8,
    pub validation: MetricsReport,
    pub seconds: f64,
}

/// Trains each variant with the same data, order, seed and step budget and
/// scores it on the held-out samples.
pub fn ablation_ordering(opts: &AblationOptions) -> Result<Vec<AblationResult>> {
    let mut data = synthetic_samples(opts.samples, opts.size, opts.opacity, opts.seed)?;
    let val = data.split_off(opts.samples.saturating_sub(opts.val_samples));
    opts.variants
        .iter()
        .map(|&variant| {
            let started = Instant::now();
            let cfg = experiment_config(opts.seed, opts.batch_size, variant);
            let (model, extractor) = build(&cfg, DType::F32, &Device::Cpu)?;
            let mut trainer = Trainer::new(model, extractor, cfg.loss_weights(), AdamSettings::from_config(&cfg))?;
            for indices in batches(data.len(), opts.batch_size, opts.seed).take(opts.steps) {
                let batch = Batch::load(&data, &indices, DType::F32, &Device::Cpu)?;
                trainer.train_step(&batch, Phase::Joint)?;
            }
            let validation = evaluate_source(Some(trainer.model()), &val, opts.batch_size)?.0;
            log::info!("ablation variant {variant}: val PSNR {:.2} dB", validation.psnr);
            Ok(AblationResult {
                variant,
                validation,
                seconds: started.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_overfit_improves_and_stops_on_budget() {
        let report = tiny_overfit(&OverfitOptions {
            samples: 2,
            size: 32,
            batch_size: 2,
            max_steps: 4,
            eval_every: 2,
            ..OverfitOptions::default()
        })
        .unwrap();
        assert_eq!(report.steps, 4);
        assert_eq!(report.trace.iter().map(|(s, _)| *s).collect::<Vec<_>>(), vec![2, 4]);
    }

    #[test]
    fn ablation_runs_every_variant_on_held_out_samples() {
        let results = ablation_ordering(&AblationOptions {
            samples: 6,
            val_samples: 2,
            size: 32,
            steps: 1,
            batch_size: 2,
            ..AblationOptions::default()
        })
        .unwrap();
        assert_eq!(results.iter().map(|r| r.variant).collect::<Vec<_>>(), vec![0, 3, 4]);
        assert!(results.iter().all(|r| r.validation.sample_count == 2 && r.validation.psnr.is_finite()));
    }
}
