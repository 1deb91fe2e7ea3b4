//! Attention-aligned conditional diffusion auto-encoder for synthesizing
//! follow-up scans from a baseline scan, age and disease state, together
//! with a synthetic progression phantom to train and score it on.

pub mod alignment;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod image;
pub mod inference;
pub mod networks;
pub mod phantom;
pub mod tensor;
pub mod training;

pub use alignment::{LossBreakdown, LossWeights, ProgressionMask};
pub use config::{Config, DiffusionConfig, EvalConfig, FidExtractor, InferenceConfig, TrainConfig};
pub use diffusion::NoiseSchedule;
pub use error::{Error, Result};
pub use evaluation::{MetricsReport, Region, RegionCounts};
pub use image::{ImageGrid, LabelVolume, Volume};
pub use networks::{
    ArchConfig, AttentionTap, ConditionVector, DiseaseState, LatentVector, ModelParameters, ProgressionAttributes,
};
pub use phantom::{PairSample, PairingPolicy, PhantomConfig, Scan, SubjectRecord};
pub use training::{Checkpoint, EpochRecord, RngState, TrainState};
