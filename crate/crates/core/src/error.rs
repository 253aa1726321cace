use thiserror::Error;

use crate::curriculum::CurriculumError;
use crate::diffusion::DiffusionError;
use crate::harness::{ConfigError, HarnessError};
use crate::heightfield::HeightfieldError;
use crate::navsim::NavError;
use crate::synthesis::SynthesisError;
use crate::terraingen::TerrainError;

/// Crate-level error, wrapping the per-module error types.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Heightfield(#[from] HeightfieldError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error(transparent)]
    Nav(#[from] NavError),
    #[error(transparent)]
    Terrain(#[from] TerrainError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
