pub mod experiments;
pub mod geo;
pub mod graph;
pub mod ingest;
pub mod metrics;
pub mod models;
pub mod nn;
