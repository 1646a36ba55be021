//! Pipeline stages over on-disk artifacts and the embedding service.

pub mod service;
pub mod stages;

pub use stages::StageConfigs;
