//! Moving-shape videos with occlusions, a per-frame classification and
//! localisation head, and a small training loop to compare temporal and
//! space-only backbones.

mod generate;
mod io;
mod train;

pub use generate::{
    generate, generate_class, generate_dataset, shape_contains, FrameLabel, GenParams, SyntheticVideo,
    Trajectory, NUM_SHAPES, SHAPE_RADIUS,
};
pub use io::{Dataset, MAGIC, VERSION};
pub use train::{
    datasets, evaluate, evaluate_with, experiment_data, predict, predict_with, run_model, run_pair, train, video_gradients, Adam, ExperimentConfig, Metrics, RunResult,
    ToyHead, TrainConfig,
};
