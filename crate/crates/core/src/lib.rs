pub mod forest;
pub mod gbdt;
pub mod metrics;
pub mod resource;
pub mod sampler;
pub mod tabular;
