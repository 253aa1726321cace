//! Diffusion-guided environment curriculum for heightfield navigation.
//!
//! The crate co-evolves a dataset of two-layer heightfield environments
//! (terrain elevation and surface canopy) with a navigation policy. New
//! environments are synthesized by a DDPM whose initial noise is a
//! difficulty-weighted fusion of noised training environments; the noising
//! depth is scheduled from the dataset's principal-component variability.
//!
//! Module map:
//! - [`heightfield`]: maps, EHF1 files, slope analysis, dataset variability
//! - [`diffusion`]: noise schedules, forward/reverse sampling, denoisers
//! - [`synthesis`]: difficulty weights, latent fusion, forward-step selection
//! - [`curriculum`]: UCB selection and the adaptive curriculum loop
//! - [`navsim`]: gridworld navigation MDP and clipped-surrogate learner
//! - [`terraingen`]: procedural terrain, canopy segmentation, bootstrap data
//! - [`harness`]: run configuration, presets, metrics, comparison charts

pub mod curriculum;
pub mod diffusion;
pub mod harness;
pub mod heightfield;
pub mod navsim;
pub mod rng;
pub mod synthesis;
pub mod terraingen;

mod error;

pub use error::{Error, Result};
