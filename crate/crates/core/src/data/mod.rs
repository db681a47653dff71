//! Dataset containers, splits, temporal windows and the synthetic
//! transport task.

pub mod bundle;
pub mod container;
pub mod temporal;
pub mod transport;

pub use bundle::{edge_homophily, generate_splits, DatasetBundle, Metadata, Split, DEFAULT_RATIOS};
pub use container::Container;
pub use temporal::{
    chronological_split, ingest_temporal_json, make_windows, normalize_series, NormScheme, Normalizer,
    TemporalDataset, Window,
};
pub use transport::{make_transport_task, TransportTask};
