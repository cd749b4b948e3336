//! Learned query-cost model over featurized plan graphs, with node-importance
//! explainers and explanation-quality metrics.

pub mod autodiff;
pub mod constructed;
pub mod explain;
pub mod features;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod plan;
pub mod rng;
pub mod settings;
pub mod tensor;
pub mod train;
pub mod workload;
