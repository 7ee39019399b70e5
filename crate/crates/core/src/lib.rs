//! Two-stage visible watermark removal.
//!
//! Stage 1 ([`stage1`]) predicts the watermark mask and the watermark
//! component and derives the intrinsic background component. Stage 2
//! ([`stage2`]) restores the background along a content-restoration path
//! and a content-imagination path built from GLCI blocks ([`blocks`]) and
//! fuses them with a non-local head. [`synthesis`] builds supervised
//! datasets, [`losses`] and [`metrics`] define training and evaluation, and
//! [`harness`] drives training, evaluation and inference.

pub mod blocks;
pub mod error;
pub mod harness;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod perceptual;
pub mod stage1;
pub mod stage2;
pub mod synthesis;

pub use error::{Error, Result};
pub use imaging::{load_image, save_image, AlphaMap, BinaryMask, FeatureMap, ImageTensor};
pub use losses::{LossBreakdown, LossTargets, LossWeights};
pub use metrics::{MetricsReport, SampleMetrics};
pub use harness::{RunRecord, TrainConfig};
pub use model::{Ablation, Checkpoint, Model, ModelConfig, TrainingState};
pub use perceptual::{PerceptualConfig, PerceptualExtractor, Provenance};
pub use stage1::{Stage1Config, Stage1Net, Stage1Output};
pub use stage2::{PathMode, Stage2Config, Stage2Net, Stage2Output};
pub use synthesis::{CompositeSpec, DatasetManifest, Sample, SynthesisConfig, WatermarkAsset};
