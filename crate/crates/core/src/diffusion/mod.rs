//! DDPM machinery: schedules, forward noising, ancestral reverse sampling
//! from any step, and two denoisers (closed-form Gaussian mixture and a
//! trainable ε-network).

mod epsnet;
mod gmm;
pub(crate) mod net;
mod sampling;
mod schedule;

pub use epsnet::{eps_mse, train_eps_net, ArchKind, ArchSpec, EpsNet, Net, NetHyper, TrainHyper, TrainReport};
pub use gmm::{gmm_denoise, GmmComponent, GmmDenoiser, GmmPrior};
pub use sampling::{
    forward_sample, forward_with_noise, reverse_from, standard_normal, ClipDenoised, Denoiser, LatentMap, ReverseVariance,
};
pub use schedule::{NoiseSchedule, ScheduleKind};

use thiserror::Error;

use crate::heightfield::HeightfieldError;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid noise schedule: {0}")]
    BadSchedule(String),
    #[error("step {step} outside [0, {max}]")]
    StepOutOfRange { step: usize, max: usize },
    #[error("latent is at step {latent} but reverse requested from step {requested}")]
    StepMismatch { latent: usize, requested: usize },
    #[error("expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite value in latent")]
    NonFinite,
    #[error("invalid mixture prior: {0}")]
    BadPrior(String),
    #[error("invalid network architecture: {0}")]
    BadArch(String),
    #[error("invalid training settings: {0}")]
    BadTraining(String),
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint schedule fingerprint {stored:#018x} does not match {expected:#018x}")]
    ScheduleMismatch { stored: u64, expected: u64 },
    #[error(transparent)]
    Heightfield(#[from] HeightfieldError),
    #[error("i/o error: {0}")]
    Io(#[source] std::io::Error),
}
