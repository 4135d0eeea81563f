//! Few-shot defect synthesis: a small latent inpainting diffusion model is
//! pre-trained on normal images, fine-tuned with low-rank adapters and a
//! learnable concept token on a handful of defect pairs, then used to paint
//! new defects into normal images. Generated sets are scored and used to
//! train downstream inspection models.

pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod eval;
mod error;
pub mod image;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use config::RunConfig;
pub use corpus::{CorpusConfig, Dataset, DatasetRecord, Split};
pub use diffusion::{NoiseSchedule, ScheduleConfig};
pub use error::{Error, Result};
pub use eval::{EvalConfig, MetricReport};
pub use image::{Image, Mask};
pub use model::{Checkpoint, DenoiserModel, ModelConfig};
pub use pipeline::{run_pipeline, Ablation, PipelineOptions};
pub use sampler::{GenerateConfig, GeneratedSet, GenerationRecord, SelectionMetric};
pub use trainer::{TrainConfig, TrainMode};
