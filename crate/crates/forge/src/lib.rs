//! Pipeline orchestration, file formats and the HTTP service for forge.

pub mod ablate;
pub mod config;
pub mod jobs;
pub mod pipeline;
pub mod service;
pub mod store;
