//! Synthetic paired data, the loss objective and the training loop.

mod config;
mod dataset;
pub mod losses;
mod phantom;
mod trainer;

pub use config::TrainConfig;
pub use dataset::{load_split, pair_seed, simulate_sensors, Case, CaseFiles, Dataset, SensorConfig};
pub use losses::{LossBreakdown, LossWeights};
pub use phantom::{gen_phantom_pair, Ellipse, PhantomGeometry, PhantomPair, Tissue};
pub use trainer::{
    aux_modality, batch_indices, loss_graph, read_curve, sample_gradients, train_step, write_curve, CurveRow, LossVars,
    Trainer, CURVE_HEADER,
};
