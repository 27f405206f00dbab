//! LiDAR place-recognition toolkit: point-cloud descriptor model with
//! dual first/second-order aggregation, segment-consistency auxiliary
//! training, tuple mining, retrieval evaluation, and a synthetic orchard
//! benchmark — all on a small reverse-mode autodiff core.

pub mod cli;
pub mod config;
pub mod dataio;
pub mod manifest;
pub mod mining;
pub mod model;
pub mod parallel;
pub mod retrieval;
pub mod synthgen;
pub mod tensor;
pub mod training;
