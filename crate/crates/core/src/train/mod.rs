//! Optimization, metrics, and the experiment drivers built on them.

pub mod config;
pub mod metrics;
pub mod node;
pub mod optim;
pub mod studies;
pub mod temporal;
pub mod transport;

pub use config::{LossKind, ModelKind, TrainConfig};
pub use metrics::{mean_std, summarize, MeanStd, Metrics};
pub use node::{evaluate_node, node_model_config, train_node_classification, NodeRun, SplitPart};
pub use optim::{AdamW, GroupHyper, GroupHypers};
pub use temporal::{evaluate_temporal, train_temporal, TemporalRun};
pub use transport::{fit_transport, TransportConfig, TransportFit};
pub use studies::{ablation_study, depth_energy_study, grid_search, sample_config, term_subsets, train_splits};
