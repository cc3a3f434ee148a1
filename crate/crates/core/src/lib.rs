pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod nets;
pub mod preprocess;
pub mod report;
pub mod synth;
pub mod train;

pub use dataset::{EyeStrategy, Sample, SampleSet, Side};
pub use eval::MetricsReport;
pub use geometry::{AnglePair, UnitVector3};
pub use synth::LandmarkSet;
pub use train::{TrainConfig, TrainHistory};
pub use candle_core::Device;
pub use candle_nn::VarMap;
