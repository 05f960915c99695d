//! Dark-experience replay for class-incremental keyword spotting: MFCC
//! frontend, a tape autodiff, TC-ResNet-8, a reservoir buffer and the
//! training loop that ties them together.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common instantiations.

pub mod autodiff;
pub mod buffer;
pub mod checkpoint;
pub mod dataset;
pub mod dsp;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod verify;

pub use autodiff::{Tape, Tensor};
pub use buffer::ReservoirBuffer;
pub use dataset::{Dataset, ScheduleLayout, SyntheticSpec, TaskSpec};
pub use dsp::{FeatureMatrix, MfccConfig, MfccExtractor};
pub use engine::{run_baseline, run_schedule, Learner, Precision, Strategy, TrainConfig};
pub use error::{Error, Result};
pub use metrics::{compute_acc, compute_bwt, AccuracyMatrix, MetricsReport};
pub use model::{TcResNet8, TcResNet8Config};
pub use scalar::Scalar;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type FeatureMatrix32 = FeatureMatrix<f32>;
pub type FeatureMatrix64 = FeatureMatrix<f64>;
pub type MfccExtractor32 = MfccExtractor<f32>;
pub type MfccExtractor64 = MfccExtractor<f64>;
pub type TcResNet8F32 = TcResNet8<f32>;
pub type TcResNet8F64 = TcResNet8<f64>;
pub type ReservoirBuffer32 = ReservoirBuffer<f32>;
pub type ReservoirBuffer64 = ReservoirBuffer<f64>;
pub type Dataset32 = Dataset<f32>;
pub type Dataset64 = Dataset<f64>;
pub type Learner32 = Learner<f32>;
pub type Learner64 = Learner<f64>;
