pub mod autodiff;
pub mod causal;
pub mod checkpoint;
pub mod cmdcm;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod pretrain;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use cmdcm::{CmdcmConfig, CmdcmModel, GateMode};
pub use data::{ActionEvent, ClickSample, EncodedSample, PromotionCalendar};
pub use eval::MetricReport;
pub use experiment::{ExperimentConfig, Variant};
pub use pretrain::PretrainedModel;
pub use synth::{GroundTruth, WorldConfig};
