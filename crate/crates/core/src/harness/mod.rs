//! Experiment orchestration: dataset generation, training, ablations, online
//! runs, the degradation study and report files.

pub mod config;
pub mod dataset;
pub mod online;
pub mod report;
pub mod training;

pub use config::ExperimentConfig;
pub use dataset::{gen_dataset, Dataset, DatasetMeta, DatasetRow, Datasets};
pub use online::{measure_degradation, run_online, run_online_with_events, DegradationRow, GopLog, Injected, Models, PolicyRun};
pub use report::{psnr_cdf, report, ResultBundle, Summary};
pub use training::{ablate_offline, load_models, train_models, AblationAxis, AblationRow, TrainedModels};
