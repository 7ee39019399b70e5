use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rirci_core::harness::{self, EvalOptions, SelftestOptions, TrainConfig};
use rirci_core::synthesis::{generate_dataset, procedural, SynthesisConfig};

#[derive(Parser)]
#[command(name = "rirci", version, about = "Visible watermark removal: data synthesis, training, evaluation and inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write procedural backgrounds and RGBA logos for synthesis.
    MakeSources(MakeSourcesArgs),
    /// Composite watermarks over backgrounds into a dataset with a manifest.
    Synthesize(SynthesizeArgs),
    /// Train a model from a TOML config.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Evaluate(EvaluateArgs),
    /// Remove the watermark from one image.
    Remove(RemoveArgs),
    /// Run the oracle and property checks.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct MakeSourcesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    backgrounds: usize,
    #[arg(long, default_value_t = 8)]
    watermarks: usize,
    /// Background side length in pixels; logos are half as large.
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, env = "RIRCI_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Opacity in (0.5, 1).
    Hwvoc,
    /// Opacity in (0.1, 1).
    Pw,
}

#[derive(Args)]
struct SynthesizeArgs {
    #[arg(long)]
    backgrounds: PathBuf,
    #[arg(long)]
    watermarks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, env = "RIRCI_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Hwvoc)]
    preset: Preset,
    /// Opacity interval as `LOW,HIGH`; overrides the preset.
    #[arg(long, value_parser = parse_pair)]
    opacity: Option<(f64, f64)>,
    /// Canvas side length.
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Fraction of samples held out as `val` (the rest get `--split`).
    #[arg(long, default_value_t = 0.02)]
    val_fraction: f64,
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set lambda3=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Ablation variant 1–4 (0 for the full model).
    #[arg(long)]
    ablation: Option<u8>,
    /// Train stage 1 alone first, then stage 2 with stage 1 frozen.
    #[arg(long)]
    two_phase: bool,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

impl TrainArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        let mut flag = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                out.push((key.to_string(), v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| format!("{:?}", p.display().to_string()));
        flag("epochs", self.epochs.map(|v| v.to_string()));
        flag("batch_size", self.batch_size.map(|v| v.to_string()));
        flag("learning_rate", self.learning_rate.map(|v| format!("{v:?}")));
        flag("seed", self.seed.map(|v| v.to_string()));
        flag("manifest", path(&self.manifest));
        flag("output_dir", path(&self.output_dir));
        flag("max_steps", self.max_steps.map(|v| v.to_string()));
        flag("ablation", self.ablation.map(|v| v.to_string()));
        flag("two_phase", self.two_phase.then(|| "true".to_string()));
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {item:?}"))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Also report PSNR per opacity bucket.
    #[arg(long)]
    buckets: bool,
    /// Score the ground truth as if it were the prediction.
    #[arg(long)]
    oracle: bool,
    /// Training config the checkpoint must have been built from.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for report.json, samples.csv and buckets.txt.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    max_samples: usize,
}

#[derive(Args)]
struct RemoveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Also write the mask, components and both path outputs as one grid.
    #[arg(long)]
    dump_intermediates: bool,
}

#[derive(Args)]
struct SelftestArgs {
    /// Smaller workloads for a fast smoke check.
    #[arg(long)]
    quick: bool,
    #[arg(long, env = "RIRCI_SEED", default_value_t = 0)]
    seed: u64,
    /// Write the outcomes as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected LOW,HIGH")?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok((parse(a)?, parse(b)?))
}

fn make_sources(a: MakeSourcesArgs) -> Result<()> {
    procedural::write_sources(&a.out, a.backgrounds, a.watermarks, (a.size, a.size), a.seed)?;
    println!(
        "wrote {} backgrounds and {} watermarks to {}",
        a.backgrounds,
        a.watermarks,
        a.out.display()
    );
    Ok(())
}

fn synthesize(a: SynthesizeArgs) -> Result<()> {
    let base = match a.preset {
        Preset::Hwvoc => SynthesisConfig::hwvoc(),
        Preset::Pw => SynthesisConfig::pw(),
    };
    let config = SynthesisConfig {
        opacity_range: a.opacity.unwrap_or(base.opacity_range),
        canvas: (a.size, a.size),
        val_fraction: a.val_fraction,
        split: a.split,
        ..base
    };
    let manifest = generate_dataset(&a.backgrounds, &a.watermarks, &config, a.count, a.seed, &a.out)?;
    let counts: Vec<String> = manifest.counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("wrote {} samples ({}) to {}", manifest.entries.len(), counts.join(", "), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = TrainConfig::load_with_overrides(a.config.as_deref(), &a.overrides()?)?;
    if a.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let record = harness::train(&cfg)?;
    let last = record.steps.last().map(|s| s.loss.total).unwrap_or(f64::NAN);
    println!(
        "trained {} steps in {:.1}s, final loss {last:.6}, best val PSNR {}",
        record.steps.len(),
        record.wall_clock_seconds,
        record.best_val_psnr.map(|p| format!("{p:.2} dB")).unwrap_or_else(|| "-".into())
    );
    println!("run record: {}", cfg.output_dir.join(harness::RUN_RECORD).display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    if !a.oracle && a.checkpoint.is_none() {
        bail!("--checkpoint is required unless --oracle is given");
    }
    let expected_config = match &a.config {
        Some(path) => Some(TrainConfig::load(path)?.model_config()?),
        None => None,
    };
    let opts = EvalOptions {
        split: a.split,
        oracle: a.oracle,
        buckets: a.buckets,
        batch_size: a.batch_size,
        max_samples: a.max_samples,
        out_dir: a.out,
        expected_config,
    };
    let outcome = harness::evaluate(a.checkpoint.as_deref(), &a.manifest, &opts)?;
    println!("{}", serde_json::to_string_pretty(&outcome.report)?);
    if let Some(b) = &outcome.buckets {
        print!("{}", rirci_core::metrics::format_bucket_table(b));
    }
    Ok(())
}

fn remove(a: RemoveArgs) -> Result<()> {
    let model = harness::load_model(&a.checkpoint, None)?;
    let grid = harness::remove_watermark(&model, &a.input, &a.output, a.dump_intermediates)?;
    println!("wrote {}", a.output.display());
    if let Some(g) = grid {
        println!("wrote {} ({})", g.display(), harness::PANELS.join(", "));
    }
    Ok(())
}

fn selftest(a: SelftestArgs) -> Result<()> {
    let opts = if a.quick {
        SelftestOptions {
            compositing_samples: 50,
            loss_fixtures: 10,
            metric_fixtures: 10,
            seed: a.seed,
        }
    } else {
        SelftestOptions {
            seed: a.seed,
            ..SelftestOptions::default()
        }
    };
    let outcomes = harness::run_selftest(&opts);
    for o in &outcomes {
        println!("{}", o.line());
    }
    if let Some(path) = a.json {
        std::fs::write(&path, serde_json::to_string_pretty(&outcomes)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        bail!("{failed} of {} checks failed", outcomes.len());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::MakeSources(a) => make_sources(a),
        Command::Synthesize(a) => synthesize(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Remove(a) => remove(a),
        Command::Selftest(a) => selftest(a),
    }
}
