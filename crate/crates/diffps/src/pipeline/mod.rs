//! Configuration, toy data generation, training, evaluation, probes,
//! ablations, and PCA visualization.

pub mod config;
pub mod data;
pub mod model;
pub mod probes;
pub mod train;
pub mod viz;

pub use config::PipelineConfig;
pub use data::{generate_toy_dataset, Dataset, SceneRecord, Split};
pub use model::{Model, Toggles};
pub use probes::{ablate, probe_layers, probe_timesteps, ProbeReport, ProbeRow};
pub use train::{evaluate, train, EvalReport, TrainMode, TrainOutput};
pub use viz::visualize_pca;
