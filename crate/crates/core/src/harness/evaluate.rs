use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::train::{SampleSource, SplitSource};
use crate::error::{Error, Result};
use crate::imaging::{images_to_tensor, load_image, map_from_tensor, save_image, ImageTensor};
use crate::metrics::{
    format_bucket_table, opacity_buckets, write_json, write_samples_csv, MetricsReport, OpacityBucket, SampleMetrics,
};
use crate::model::{read_checkpoint, Model, ModelConfig};
use crate::nn::{crop, reflect_pad_to_multiple};
use crate::synthesis::Dataset;

pub const REPORT_FILE: &str = "report.json";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const BUCKETS_FILE: &str = "buckets.txt";

/// Panels of the intermediates grid, left to right.
pub const PANELS: [&str; 6] = ["mask", "watermark_component", "background_component", "restored", "imagined", "output"];

/// Scores every sample of `source`. With no model, the ground truth stands in
/// for the prediction (`Î = I`, `M̂ = M`).
pub fn evaluate_source(
    model: Option<&Model>,
    source: &dyn SampleSource,
    batch_size: usize,
) -> Result<(MetricsReport, Vec<SampleMetrics>)> {
    if source.is_empty() {
        return Err(Error::config("cannot evaluate an empty split"));
    }
    let batch_size = batch_size.max(1);
    let mut scores = Vec::with_capacity(source.len());
    let indices: Vec<usize> = (0..source.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let samples = chunk.iter().map(|&i| source.load(i)).collect::<Result<Vec<_>>>()?;
        let predictions: Vec<(ImageTensor, ndarray::Array2<f64>)> = match model {
            None => samples.iter().map(|(_, s)| (s.i.clone(), s.mask.as_f64())).collect(),
            Some(model) => {
                let j = images_to_tensor(
                    &samples.iter().map(|(_, s)| &s.j).collect::<Vec<_>>(),
                    model.dtype(),
                    model.device(),
                )?;
                let (s1, s2) = model.forward(&j)?;
                let fused = s2.fused_clamped()?;
                (0..samples.len())
                    .map(|k| Ok((ImageTensor::from_tensor(&fused, k)?.quantized(), map_from_tensor(&s1.mask, k)?)))
                    .collect::<Result<_>>()?
            }
        };
        for ((id, sample), (pred, mask)) in samples.iter().zip(&predictions) {
            scores.push(SampleMetrics::compute(
                id.clone(),
                pred,
                &sample.i,
                mask,
                &sample.mask,
                sample.spec.as_ref().map(|s| s.opacity),
            )?);
        }
    }
    Ok((MetricsReport::aggregate(&scores)?, scores))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub split: String,
    /// Score the ground truth instead of a model.
    pub oracle: bool,
    pub buckets: bool,
    pub batch_size: usize,
    /// Evaluate only the first this many samples (0 means all).
    pub max_samples: usize,
    pub out_dir: Option<PathBuf>,
    /// Refuse checkpoints whose configuration differs from this one.
    pub expected_config: Option<ModelConfig>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: "test".into(),
            oracle: false,
            buckets: false,
            batch_size: 8,
            max_samples: 0,
            out_dir: None,
            expected_config: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub split: String,
    pub report: MetricsReport,
    pub buckets: Option<Vec<OpacityBucket>>,
    #[serde(skip)]
    pub samples: Vec<SampleMetrics>,
}

/// Loads a checkpoint. With `expected`, the model is built from that
/// configuration and a checkpoint made for any other one is refused.
pub fn load_model(checkpoint: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    let ckpt = read_checkpoint(checkpoint, &Device::Cpu)?;
    match expected {
        Some(cfg) => {
            let model = Model::new(cfg, ckpt.state.seed, DType::F32, &Device::Cpu)?;
            model.restore(&ckpt)?;
            Ok(model)
        }
        None => Model::from_checkpoint(&ckpt, DType::F32, &Device::Cpu),
    }
}

/// Evaluates a checkpoint (or the oracle) on one split of a manifest and
/// writes the report, the per-sample CSV and, on request, the opacity table.
pub fn evaluate(checkpoint: Option<&Path>, manifest: &Path, opts: &EvalOptions) -> Result<EvalOutcome> {
    let dataset = Dataset::open(manifest)?;
    let source = SplitSource::new(&dataset, &opts.split).truncated(opts.max_samples);
    if source.is_empty() {
        return Err(Error::config(format!("split `{}` has no samples", opts.split)));
    }
    let model = match (opts.oracle, checkpoint) {
        (true, _) => None,
        (false, Some(path)) => Some(load_model(path, opts.expected_config.as_ref())?),
        (false, None) => return Err(Error::config("a checkpoint is required unless oracle mode is on")),
    };
    let (report, samples) = evaluate_source(model.as_ref(), &source, opts.batch_size)?;
    let outcome = EvalOutcome {
        split: opts.split.clone(),
        report,
        buckets: opts.buckets.then(|| opacity_buckets(&samples)),
        samples,
    };
    if let Some(dir) = &opts.out_dir {
        write_artifacts(&outcome, dir)?;
    }
    Ok(outcome)
}

pub fn write_artifacts(outcome: &EvalOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(outcome, dir.join(REPORT_FILE))?;
    write_samples_csv(&outcome.samples, dir.join(SAMPLES_FILE))?;
    if let Some(b) = &outcome.buckets {
        let path = dir.join(BUCKETS_FILE);
        std::fs::write(&path, format_bucket_table(b)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Result of watermark removal on one image.
#[derive(Debug, Clone)]
pub struct Removal {
    pub output: ImageTensor,
    /// The [`PANELS`] in order; absent paths are black.
    pub panels: Vec<ImageTensor>,
}

fn first_image(t: &Tensor, h: usize, w: usize) -> Result<ImageTensor> {
    ImageTensor::from_tensor(&crop(t, h, w)?, 0)
}

/// Runs both stages on one image. Inputs of any size are reflection-padded
/// to a multiple of 16 and the outputs cropped back.
pub fn remove(model: &Model, image: &ImageTensor) -> Result<Removal> {
    let (h, w) = image.dims();
    let j = images_to_tensor(&[image], model.dtype(), model.device())?;
    let padded = reflect_pad_to_multiple(&j, 16, 16)?;
    let (s1, s2) = model.forward(&padded)?;
    let output = first_image(&s2.fused_clamped()?, h, w)?;
    let mask = map_from_tensor(&crop(&s1.mask, h, w)?, 0)?;
    let mask = ImageTensor::from_clamped(
        mask.insert_axis(Axis(2))
            .broadcast((h, w, 3))
            .expect("single channel broadcasts")
            .to_owned(),
    )?;
    let black = ImageTensor::zeros(h, w);
    let optional = |t: &Option<Tensor>| -> Result<ImageTensor> {
        t.as_ref().map(|t| first_image(t, h, w)).unwrap_or_else(|| Ok(black.clone()))
    };
    let panels = vec![
        mask,
        optional(&s1.watermark_component)?,
        first_image(&s1.background_component, h, w)?,
        optional(&s2.restored)?,
        optional(&s2.imagined)?,
        output.clone(),
    ];
    Ok(Removal { output, panels })
}

/// Places images side by side.
pub fn panel_row(panels: &[ImageTensor]) -> Result<ImageTensor> {
    let (h, w) = panels
        .first()
        .ok_or_else(|| Error::contract("no panels to lay out"))?
        .dims();
    let mut grid = Array3::zeros((h, w * panels.len(), 3));
    for (k, p) in panels.iter().enumerate() {
        if p.dims() != (h, w) {
            return Err(Error::contract("panels must share a size"));
        }
        grid.slice_mut(s![.., k * w..(k + 1) * w, ..]).assign(p.data());
    }
    ImageTensor::new(grid)
}

/// Path of the intermediates grid written next to `output`.
pub fn intermediates_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
    output.with_file_name(format!("{stem}_intermediates.png"))
}

/// Removes the watermark from the image at `input` and writes `Î` to
/// `output`; with `dump_intermediates` also writes the panel grid. Returns
/// the grid path when one was written.
pub fn remove_watermark(
    model: &Model,
    input: &Path,
    output: &Path,
    dump_intermediates: bool,
) -> Result<Option<PathBuf>> {
    let image = load_image(input)?.rgb;
    let removal = remove(model, &image)?;
    save_image(&removal.output, output)?;
    if !dump_intermediates {
        return Ok(None);
    }
    let path = intermediates_path(output);
    save_image(&panel_row(&removal.panels)?, &path)?;
    Ok(Some(path))
}
